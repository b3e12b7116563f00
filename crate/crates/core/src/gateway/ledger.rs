//! Token and monetary cost accounting.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use super::{GatewayError, Usage};

/// Decimal <-> JSON number. Parsing goes through the number's shortest
/// decimal representation so `0.15` stays `0.15`.
pub(crate) mod decimal_number {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Decimal, s: S) -> Result<S::Ok, S::Error> {
        match value.to_f64() {
            Some(f) => s.serialize_f64(f),
            None => s.serialize_str(&value.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
        let raw = serde_json::Value::deserialize(d)?;
        let text = match &raw {
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::String(s) => s.clone(),
            other => return Err(D::Error::custom(format!("expected a number, got {other}"))),
        };
        Decimal::from_str(&text).or_else(|_| Decimal::from_scientific(&text)).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Price {
    /// USD per 1M prompt tokens.
    #[serde(with = "decimal_number")]
    pub prompt_per_million: Decimal,
    /// USD per 1M completion tokens.
    #[serde(with = "decimal_number")]
    pub completion_per_million: Decimal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, Price>);

impl PriceTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, crate::model::ModelError> {
        crate::model::read_json(path.as_ref())
    }

    pub fn with(mut self, model: &str, prompt_per_million: &str, completion_per_million: &str) -> Self {
        self.0.insert(
            model.to_owned(),
            Price {
                prompt_per_million: Decimal::from_str(prompt_per_million).expect("decimal literal"),
                completion_per_million: Decimal::from_str(completion_per_million).expect("decimal literal"),
            },
        );
        self
    }

    pub fn get(&self, model: &str) -> Option<&Price> {
        self.0.get(model)
    }
}

/// `prompt × p_in / 10⁶ + completion × p_out / 10⁶`, rounded half-to-even at 6 decimals.
pub fn cost_of(usage: Usage, model: &str, table: &PriceTable) -> Result<Decimal, GatewayError> {
    let price = table.get(model).ok_or_else(|| GatewayError::UnknownModel(model.to_owned()))?;
    let million = Decimal::from(1_000_000u32);
    let raw = Decimal::from(usage.prompt_tokens) * price.prompt_per_million / million
        + Decimal::from(usage.completion_tokens) * price.completion_per_million / million;
    Ok(raw.round_dp_with_strategy(6, RoundingStrategy::MidpointNearestEven))
}

/// Spreads a routing total (seconds or USD) over the `instances` it serves.
pub fn amortized_routing_cost(total: f64, instances: usize) -> Result<f64, GatewayError> {
    if instances == 0 {
        return Err(GatewayError::DivisionByZero);
    }
    Ok(total / instances as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Chat,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: EntryKind,
    pub tag: String,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "decimal_number")]
    pub usd_cost: Decimal,
    pub latency_s: f64,
}

#[derive(Debug, Default)]
pub struct UsageLedger {
    prices: PriceTable,
    entries: Mutex<Vec<LedgerEntry>>,
}

impl UsageLedger {
    pub fn new(prices: PriceTable) -> Self {
        Self { prices, entries: Mutex::new(Vec::new()) }
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn record_chat(&self, tag: &str, model: &str, usage: Usage, latency_s: f64) -> Result<Decimal, GatewayError> {
        let usd = cost_of(usage, model, &self.prices)?;
        self.push(LedgerEntry {
            kind: EntryKind::Chat,
            tag: tag.to_owned(),
            model: model.to_owned(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            usd_cost: usd,
            latency_s,
        });
        Ok(usd)
    }

    /// Flat-priced tool invocation (tool bridge calls).
    pub fn record_tool(&self, tag: &str, tool: &str, usd: Decimal, latency_s: f64) {
        self.push(LedgerEntry {
            kind: EntryKind::Tool,
            tag: tag.to_owned(),
            model: tool.to_owned(),
            prompt_tokens: 0,
            completion_tokens: 0,
            usd_cost: usd,
            latency_s,
        });
    }

    fn push(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger lock").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_usd(&self) -> Decimal {
        self.entries.lock().expect("ledger lock").iter().map(|e| e.usd_cost).sum()
    }

    pub fn usd_with_prefix(&self, prefix: &str) -> Decimal {
        self.entries.lock().expect("ledger lock").iter().filter(|e| e.tag.starts_with(prefix)).map(|e| e.usd_cost).sum()
    }

    pub fn latency_with_prefix(&self, prefix: &str) -> f64 {
        self.entries
            .lock()
            .expect("ledger lock")
            .iter()
            .filter(|e| e.tag.starts_with(prefix))
            .map(|e| e.latency_s)
            .sum()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries().iter().map(|e| serde_json::to_string(e).expect("ledger entry") + "\n").collect()
    }
}

pub fn parse_ledger_jsonl(text: &str) -> Result<Vec<LedgerEntry>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> PriceTable {
        PriceTable::default().with("gpt", "2.50", "10.00").with("mini", "0.15", "0.60")
    }

    fn usage(p: u64, c: u64) -> Usage {
        Usage { prompt_tokens: p, completion_tokens: c }
    }

    #[test]
    fn unit_definition() {
        assert_eq!(cost_of(usage(0, 0), "gpt", &table()).unwrap(), Decimal::ZERO);
        assert_eq!(cost_of(usage(1_000_000, 0), "gpt", &table()).unwrap(), Decimal::from_str("2.50").unwrap());
        assert_eq!(cost_of(usage(1234, 567), "mini", &table()).unwrap(), Decimal::from_str("0.000525").unwrap());
        assert!(matches!(cost_of(usage(1, 1), "nope", &table()), Err(GatewayError::UnknownModel(m)) if m == "nope"));
    }

    #[test]
    fn rounds_half_to_even() {
        // 5 tokens at $0.1/M = 0.0000005 -> 0.000000; 15 tokens -> 0.0000015 -> 0.000002
        let t = PriceTable::default().with("m", "0.1", "0");
        assert_eq!(cost_of(usage(5, 0), "m", &t).unwrap(), Decimal::ZERO);
        assert_eq!(cost_of(usage(15, 0), "m", &t).unwrap(), Decimal::from_str("0.000002").unwrap());
        assert_eq!(cost_of(usage(25, 0), "m", &t).unwrap(), Decimal::from_str("0.000002").unwrap());
    }

    #[test]
    fn price_table_json_keeps_decimal_literals() {
        let t: PriceTable =
            serde_json::from_str(r#"{"mini":{"prompt_per_million":0.15,"completion_per_million":0.6}}"#).unwrap();
        assert_eq!(t.get("mini").unwrap().prompt_per_million, Decimal::from_str("0.15").unwrap());
    }

    #[test]
    fn amortization() {
        assert_eq!(amortized_routing_cost(120.0, 1000).unwrap(), 0.12);
        assert_eq!(amortized_routing_cost(0.0, 7).unwrap(), 0.0);
        assert_eq!(amortized_routing_cost(120.0, 10_000).unwrap(), 0.012);
        assert!(matches!(amortized_routing_cost(1.0, 0), Err(GatewayError::DivisionByZero)));
    }

    #[test]
    fn ledger_conservation_and_jsonl() {
        let ledger = UsageLedger::new(table());
        ledger.record_chat("proposer:s0", "gpt", usage(1000, 200), 1.5).unwrap();
        ledger.record_chat("code_checker:s0", "mini", usage(777, 33), 0.5).unwrap();
        ledger.record_tool("bench:sol-0:i1:0", "vlm", Decimal::from_str("0.002").unwrap(), 0.1);
        let sum: Decimal = ledger.entries().iter().map(|e| e.usd_cost).sum();
        assert_eq!(ledger.total_usd(), sum);
        assert_eq!(ledger.usd_with_prefix("bench:"), Decimal::from_str("0.002").unwrap());
        let back = parse_ledger_jsonl(&ledger.to_jsonl()).unwrap();
        assert_eq!(back, ledger.entries());
    }
}
