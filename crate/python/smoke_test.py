#!/usr/bin/env python3
"""Smoke test for the remnist extension module.

Build it first (`cargo build -p remnist-py`), then run this script. It
copies the freshest libremnist.so into a temp dir under the importable
name remnist.so, imports it, and exercises every exported function.
"""

import gzip
import math
import shutil
import struct
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / profile / "libremnist.so"
        for profile in ("debug", "release")
    ]
    built = [p for p in candidates if p.is_file()]
    if not built:
        sys.exit("libremnist.so not found; run `cargo build -p remnist-py` first")
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="remnist-py-"))
    shutil.copy2(newest, stage / "remnist.so")
    sys.path.insert(0, str(stage))
    import remnist

    print(f"imported {newest}")
    return remnist


SIDE = 128


def make_bitmap(r0, c0, height, width):
    """Packed 128x128 bitmap with an L-shaped blob.

    A filled rectangle would crop to a constant raster, which the
    quantizer maps to all zeros; cutting a quadrant keeps background
    inside the bounding box.
    """
    bits = bytearray(SIDE * SIDE // 8)
    for r in range(r0, r0 + height):
        for c in range(c0, c0 + width):
            if r < r0 + height // 2 and c >= c0 + width // 2:
                continue
            i = r * SIDE + c
            bits[i // 8] |= 0x80 >> (i % 8)
    return bytes(bits)


def write_archive(path, records):
    """records: list of (writer_id, partition_id, label, bitmap)."""
    with open(path, "wb") as f:
        f.write(b"NBIN1\n")
        f.write(struct.pack(">I", len(records)))
        for writer, partition, label, bitmap in records:
            f.write(struct.pack(">IHBB", writer, partition, label, 0))
            assert len(bitmap) == 2048
            f.write(bitmap)


def check_stats(m):
    w = m.wald_interval(10_000, 100)
    assert abs(w["nu"] - 0.01) < 1e-12, w
    assert 0.00195 <= w["halfwidth"] <= 0.00205, w

    assert m.paired_worse(4, 0)["decision"] == "worse"
    assert m.paired_worse(2, 0)["decision"] == "not_established"

    k = m.bonferroni_max_k(40, 10)
    assert 4500 <= k <= 4550, k

    for x in (0.0, 0.5, 1.0, 2.5):
        assert abs(m.erfc_inv(m.erfc(x)) - x) <= 1e-10
    assert abs(m.erfc(1.0) - math.erfc(1.0)) <= 1e-12
    print("stats ok")


def check_hungarian(m):
    assignment, cost = m.hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert assignment == [1, 0, 2], assignment
    assert cost == 5.0, cost
    print("hungarian ok")


def check_preprocess_and_distance(m):
    digit = m.preprocess_bitmap(make_bitmap(30, 40, 50, 24))
    assert len(digit) == 784
    assert any(digit), "digit must have ink"
    # legacy resampler quantizes differently but still produces ink
    assert any(m.preprocess_bitmap(make_bitmap(30, 40, 50, 24), legacy=True))

    # unpacked input (one byte per pixel) is accepted too
    unpacked = bytes(
        1 if 30 <= r < 80 and 40 <= c < 64 and not (r < 55 and c >= 52) else 0
        for r in range(SIDE)
        for c in range(SIDE)
    )
    assert m.preprocess_bitmap(unpacked) == digit

    self_dist = m.jittered_distance(digit, digit)
    assert self_dist["l2"] == 0.0 and (self_dist["dx"], self_dist["dy"]) == (0, 0)

    # move the copy right by one column; shifting it back (dx = -1)
    # must realign it exactly
    grid = [list(digit[r * 28 : (r + 1) * 28]) for r in range(28)]
    shifted = bytes(
        grid[r][c - 1] if c > 0 else 0 for r in range(28) for c in range(28)
    )
    d = m.jittered_distance(digit, shifted)
    assert d["l2"] == 0.0 and (d["dx"], d["dy"]) == (-1, 0), d
    print("preprocess + distance ok")


def check_idx_round_trip(m, tmp):
    path = str(tmp / "probe-idx3-ubyte.gz")
    data = bytes(range(24))
    m.idx_write_u8(path, [2, 3, 4], data)
    with gzip.open(path, "rb") as f:
        assert f.read(4) == b"\x00\x00\x08\x03"
    back = m.idx_read(path)
    assert back["dims"] == [2, 3, 4] and back["dtype"] == "u8"
    assert back["data"] == data

    path = str(tmp / "probe-idx2-int")
    m.idx_write_i32(path, [2, 2], [1, -2, 3, -4])
    back = m.idx_read(path)
    assert back["dims"] == [2, 2] and back["dtype"] == "i32"
    assert back["data"] == [1, -2, 3, -4]
    print("idx round trip ok")


def check_assemble(m, tmp):
    # six writers of the scanned test partition, ten digits each; with
    # no completion pool both dataset halves draw purely from seeds
    records = []
    for writer in range(6):
        for i in range(10):
            bitmap = make_bitmap(20 + writer * 2, 20 + i * 3, 40, 30 + i)
            records.append((writer, 4, (writer + i) % 10, bitmap))
    archive = tmp / "mini.nbin"
    write_archive(archive, records)

    out = tmp / "rebuilt"
    summary = m.assemble(str(archive), str(out), writer_split=3, target=30, seed=7)
    assert summary["train_len"] == 30 and summary["test_len"] == 30, summary
    assert summary["duplicates_removed"] == 0, summary

    images = m.idx_read(str(out / "train-images-idx3-ubyte"))
    labels = m.idx_read(str(out / "train-labels-idx1-ubyte"))
    meta = m.idx_read(str(out / "train-metadata-idx2-int"))
    assert images["dims"] == [30, 28, 28]
    assert labels["dims"] == [30]
    assert meta["dims"][0] == 30

    # writers 0-2 seed training; metadata column 2 is the writer id
    width = meta["dims"][1]
    writers = {meta["data"][row * width + 2] for row in range(30)}
    assert writers == {0, 1, 2}, writers
    print("assemble ok")


def main():
    m = import_module()
    tmp = Path(tempfile.mkdtemp(prefix="remnist-smoke-"))
    check_stats(m)
    check_hungarian(m)
    check_preprocess_and_distance(m)
    check_idx_round_trip(m, tmp)
    check_assemble(m, tmp)
    print("smoke test passed")


if __name__ == "__main__":
    main()
