"""Regenerates the toy depth-comparison task: images, task.json and tool fixtures."""

import json
import os
import random

from PIL import Image, ImageDraw

HERE = os.path.dirname(os.path.abspath(__file__))
N, LABELED, SIZE = 20, 4, 96


def main():
    rng = random.Random(20)
    os.makedirs(os.path.join(HERE, "images"), exist_ok=True)
    instances, depths, vlm = [], {}, {}
    for k in range(N):
        iid = "toy-%02d" % k
        a = (rng.randrange(8, SIZE - 8), rng.randrange(8, SIZE - 8))
        b = (rng.randrange(8, SIZE - 8), rng.randrange(8, SIZE - 8))
        while abs(a[1] - b[1]) < 8:
            b = (b[0], rng.randrange(8, SIZE - 8))
        # depth grows toward the top of the frame
        img = Image.new("L", (SIZE, SIZE))
        img.putdata([int(255 * y / (SIZE - 1)) for y in range(SIZE) for _ in range(SIZE)])
        img = img.convert("RGB")
        draw = ImageDraw.Draw(img)
        for (x, y), color in ((a, (220, 40, 40)), (b, (40, 40, 220))):
            draw.ellipse((x - 3, y - 3, x + 3, y + 3), fill=color)
        name = "images/%s.png" % iid
        img.save(os.path.join(HERE, name))
        da, db = round(10.0 * (1 - a[1] / SIZE), 3), round(10.0 * (1 - b[1] / SIZE), 3)
        answer = "(A)" if da < db else "(B)"
        depths[iid] = {"depths": [da, db]}
        vlm[iid] = "Point %s looks closer. The answer is %s." % (answer[1], answer)
        inst = {
            "id": iid,
            "images": [name],
            "request_prompt": "Which point is closer to the camera? (A) point A at %s (B) point B at %s"
            % (list(a), list(b)),
        }
        if k < LABELED:
            inst["ground_truth"] = answer
        instances.append(inst)
    task = {
        "task_id": "toy-depth",
        "description": "Given an image and two marked points, decide which point is closer to the camera. "
        "Answer with the choice label, e.g. (A).",
        "example_count": LABELED,
        "constraints": [{"kind": "MAX_MONETARY_COST_PER_INSTANCE", "value": 0.01}],
        "instances": instances,
    }
    with open(os.path.join(HERE, "task.json"), "w") as f:
        json.dump(task, f, indent=2)
        f.write("\n")
    tools = [
        {"kind": "fixture", "name": "depth_estimator", "usd_per_call": 0, "latency_ms": 300, "responses": depths},
        {"kind": "fixture", "name": "vlm_query", "usd_per_call": 0.002, "latency_ms": 0, "responses": vlm},
    ]
    with open(os.path.join(HERE, "tools.json"), "w") as f:
        json.dump(tools, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
