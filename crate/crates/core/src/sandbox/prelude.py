import json as _rk_json
import os as _rk_os
import sys as _rk_sys
import urllib.error as _rk_urlerror
import urllib.request as _rk_url


def _rk_write(line):
    _rk_sys.stdout.write("\n" + line + "\n")
    _rk_sys.stdout.flush()


def emit_answer(text):
    _rk_write("@@ANSWER@@ " + _rk_json.dumps(str(text), ensure_ascii=False))


def emit_trace(label, value):
    label = "_".join(str(label).split()) or "_"
    _rk_write("@@TRACE@@ " + label + " " + _rk_json.dumps(value, ensure_ascii=False, default=repr))


def load_instance():
    with open(_rk_os.path.join("inputs", "manifest.json"), encoding="utf-8") as f:
        manifest = _rk_json.load(f)
    manifest["images"] = [_rk_os.path.abspath(p) for p in manifest["images"]]
    return manifest


def call_tool(name, **args):
    base = _rk_os.environ.get("TOOL_BRIDGE_URL")
    if not base:
        raise RuntimeError("tool bridge is not configured")
    with open(_rk_os.path.join("inputs", "manifest.json"), encoding="utf-8") as f:
        instance_id = _rk_json.load(f)["instance_id"]
    req = _rk_url.Request(
        base.rstrip("/") + "/tool/" + name,
        data=_rk_json.dumps(args).encode("utf-8"),
        headers={
            "Content-Type": "application/json",
            "X-Instance-Id": instance_id,
            "X-Run-Tag": _rk_os.environ.get("TOOL_RUN_TAG", ""),
        },
        method="POST",
    )
    try:
        with _rk_url.urlopen(req, timeout=600) as resp:
            return _rk_json.loads(resp.read().decode("utf-8"))
    except _rk_urlerror.HTTPError as e:
        raise RuntimeError("tool %s failed: %s" % (name, e.read().decode("utf-8", "replace"))) from None
