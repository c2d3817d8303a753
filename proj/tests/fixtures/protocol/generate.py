"""Writes the denoiser wire-protocol golden fixtures.

Encodes frames with Python's struct/json independently of the C++ encoder so
both sides are checked against the same bytes.
"""
import json
import struct
from pathlib import Path

HERE = Path(__file__).resolve().parent


def header_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def frame(magic, header, floats):
    text = header_bytes(header)
    return magic + struct.pack("<II", 1, len(text)) + text + struct.pack("<%df" % len(floats), *floats)


def pattern(n, salt):
    # Exactly representable in f32: multiples of 1/64 in [-1, 1).
    return [((i * 37 + salt * 11) % 128 - 64) / 64.0 for i in range(n)]


def request(shape, timestep, cfg, condition, video, image=()):
    header = {"shape": list(shape), "timestep": timestep, "cfg_scale": cfg, "condition": condition}
    return frame(b"DPGD", header, list(video) + list(image))


def response(shape, eps):
    return frame(b"DPGR", {"shape": list(shape)}, eps)


def count(shape):
    n = 1
    for s in shape:
        n *= s
    return n


def main():
    cases = []

    def add(name, body, status, reply=None, shape=None):
        (HERE / f"{name}.req.bin").write_bytes(body)
        entry = {"name": name, "request": f"{name}.req.bin", "status": status}
        if reply is not None:
            (HERE / f"{name}.resp.bin").write_bytes(reply)
            entry["response"] = f"{name}.resp.bin"
            entry["shape"] = list(shape)
        cases.append(entry)

    shape = (2, 4, 4, 3)
    video = pattern(count(shape), 1)
    small = request(shape, 500, 100.0, {"kind": "text", "text": "a tulip swaying in the wind"}, video)
    add("echo_small_text", small, 200, response(shape, video), shape)

    shape = (2, 3, 3, 3)
    video = pattern(count(shape), 2)
    image = pattern(27, 3)
    body = request(shape, 20, 7.5, {"kind": "image", "image_shape": [3, 3, 3]}, video, image)
    add("echo_image_condition", body, 200, response(shape, video), shape)

    shape = (16, 64, 64, 3)
    video = pattern(count(shape), 4)
    body = request(shape, 980, 100.0, {"kind": "none"}, video)
    add("echo_16x64x64", body, 200, response(shape, video), shape)

    add("truncated_payload", small[:-7], 400)
    add("bad_magic", b"DPGX" + small[4:], 400)
    add("bad_version", small[:4] + struct.pack("<I", 2) + small[8:], 400)

    shape = (2, 3, 3, 3)
    video = pattern(count(shape), 5)
    image = pattern(5 * 5 * 3, 6)
    body = request(shape, 100, 100.0, {"kind": "image", "image_shape": [5, 5, 3]}, video, image)
    add("image_shape_mismatch", body, 422)

    (HERE / "manifest.json").write_text(json.dumps({"version": 1, "cases": cases}, indent=2) + "\n")


if __name__ == "__main__":
    main()
