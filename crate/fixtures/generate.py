"""Regenerates the bundled 41-frame scene log, its FRONT images and the split file."""

import json
import math
from pathlib import Path

from PIL import Image

HERE = Path(__file__).parent
STEP = 0.01


def controls(t):
    """(acceleration, yaw rate) schedule: speed up, left turn, straight, right curve, stop."""
    if t < 4:
        return 1.0, 0.0
    if t < 8:
        return 0.0, 0.18
    if t < 11:
        return 0.0, 0.0
    if t < 13.5:
        return 0.3, -0.10
    if t < 17:
        return -2.5, 0.0
    return 0.0, 0.0


def main():
    x = y = heading = 0.0
    speed = 3.0
    poses = []
    for i in range(int(round(20 / STEP)) + 1):
        t = i * STEP
        if i % 50 == 0:
            poses.append((t, x, y, heading))
        accel, yaw_rate = controls(t)
        x += speed * math.cos(heading) * STEP
        y += speed * math.sin(heading) * STEP
        if speed > 0:
            heading += yaw_rate * STEP
        speed = max(0.0, speed + accel * STEP)

    (HERE / "images" / "FRONT").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (t, x, y, heading) in enumerate(poses):
        name = f"images/FRONT/{i:03d}.png"
        Image.new("RGB", (8, 8), (i * 6 % 256, 100, 255 - i * 6 % 256)).save(HERE / name)
        frames.append(
            {
                "timestamp": round(t, 3),
                "ego_pose": {"x": round(x, 4), "y": round(y, 4), "heading": round(heading, 5)},
                "images": {"FRONT": name},
            }
        )
    record = {"version": "scenelog/1", "scene_id": "scene-fixture", "frames": frames}
    (HERE / "scene.jsonl").write_text(json.dumps(record, separators=(",", ":")) + "\n")
    split = {"train": ["scene-train-a", "scene-train-b"], "test": ["scene-fixture"]}
    (HERE / "split.json").write_text(json.dumps(split, indent=2) + "\n")


if __name__ == "__main__":
    main()
