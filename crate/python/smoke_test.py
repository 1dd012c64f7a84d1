#!/usr/bin/env python3
"""Smoke test for the tale_py extension module.

Builds nothing itself: run `cargo build -p tale-py --release` first (or pass
--profile debug after a debug build). The script locates the cdylib, imports
it under the expected module name, and exercises the bound surface end to
end, including a reproducible composition run.
"""

import argparse
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def locate_library(profile: str) -> Path:
    lib = REPO / "target" / profile / "libtale_py.so"
    if not lib.exists():
        sys.exit(
            f"{lib} not found - run `cargo build -p tale-py --{profile}`"
            if profile == "release"
            else f"{lib} not found - run `cargo build -p tale-py`"
        )
    return lib


def import_module(lib: Path, scratch: Path):
    target = scratch / "tale_py.so"
    shutil.copyfile(lib, target)
    sys.path.insert(0, str(scratch))
    import tale_py  # noqa: E402

    return tale_py


CHECKS = []


def check(name):
    def wrap(fn):
        CHECKS.append((name, fn))
        return fn

    return wrap


@check("schedule identity and endpoints")
def _(t, tmp):
    s = t.Schedule(20, "cosine")
    assert s.steps == 20
    a0, s0 = s.alpha_sigma(0)
    at, st = s.alpha_sigma(20)
    assert a0 >= 0.999 and st >= 0.99
    for i in range(21):
        a, sg = s.alpha_sigma(i)
        assert abs(a * a + sg * sg - 1.0) <= 1e-12
    try:
        s.alpha_sigma(21)
    except Exception:
        pass
    else:
        raise AssertionError("index 21 should be rejected")


@check("seeded noise is reproducible")
def _(t, tmp):
    a = t.gaussian_noise(3, 8, 8, 42)
    b = t.gaussian_noise(3, 8, 8, 42)
    c = t.gaussian_noise(3, 8, 8, 43)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert a.shape == (3, 8, 8)


@check("masked channel statistics")
def _(t, tmp):
    data = [0.0] * 16
    data[0], data[1] = 1.0, 3.0
    tensor = t.Tensor(1, 4, 4, data)
    mask = t.Mask(4, 4, bytes([1, 1] + [0] * 14))
    means, stds, count = t.masked_channel_stats(tensor, mask)
    assert means == [2.0] and stds == [1.0] and count == 2


@check("selective initiation and adaptive normalization")
def _(t, tmp):
    user = t.Mask.from_box(16, 16, "2,2,12,12")
    obj = t.Mask.from_box(16, 16, "4,4,8,8")
    ms = t.MaskSet(user, obj, 2, 0)
    assert ms.latent_object.active_count() >= 4
    z_bg = t.gaussian_noise(3, 8, 8, 1)
    z_fg = t.gaussian_noise(3, 8, 8, 2)
    merged = t.selective_init(z_bg, z_fg, ms)
    assert merged.shape == (3, 8, 8)
    # lambda = 0 is a bitwise no-op
    out0 = t.adaptive_normalize(merged, z_bg, ms, 0.0)
    assert out0.digest() == merged.digest()
    # lambda = 1 pulls the masked stats onto the background's
    out1 = t.adaptive_normalize(merged, z_bg, ms, 1.0)
    obj_means, obj_stds, _ = t.masked_channel_stats(out1, ms.latent_object)
    full = t.Mask.full(8, 8, True)
    bg_means, bg_stds, _ = t.masked_channel_stats(z_bg, full)
    for got, want in zip(obj_means + obj_stds, bg_means + bg_stds):
        assert abs(got - want) <= 1e-4, (got, want)


@check("lambda schedule values")
def _(t, tmp):
    cfg = t.Config()
    assert math.isclose(t.lambda_at(cfg, 7), 0.2)
    assert math.isclose(t.lambda_at(cfg, 3), 0.6)
    same = t.Config("same-domain")
    assert math.isclose(t.lambda_at(same, 4), 0.1)


@check("edge map and ssim basics")
def _(t, tmp):
    flat = t.Tensor(3, 8, 8, [0.5] * (3 * 64))
    edges = t.edge_map(flat)
    assert all(v == 0.0 for v in edges.tolist())
    noisy = t.gaussian_noise(1, 9, 9, 5)
    clipped = t.Tensor(1, 9, 9, [min(max(0.5 + 0.2 * v, 0.0), 1.0) for v in noisy.tolist()])
    assert abs(t.ssim(clipped, clipped) - 1.0) <= 1e-9


@check("dataset, training and reproducible composition")
def _(t, tmp):
    ds = tmp / "ds"
    digest_a = t.make_dataset(9, 4, ds)
    digest_b = t.make_dataset(9, 4, tmp / "ds2")
    assert digest_a == digest_b
    losses = t.train_toy(ds, tmp / "toy.bin", epochs=8, seed=3)
    assert losses[-1] < losses[0], losses
    index = json.loads((ds / "index.json").read_text())
    sample = index["samples"][0]
    cfg = t.Config()
    cfg.set("seed", "11")
    kwargs = dict(
        bg=ds / sample["background"],
        fg=ds / sample["foreground"],
        obj_mask=ds / sample["object_mask"],
        user_box=sample["user_box"],
        prompt=sample["prompt"],
        config=cfg,
        weights=tmp / "toy.bin",
    )
    first = t.compose_files(out_dir=tmp / "run1", **kwargs)
    second = t.compose_files(out_dir=tmp / "run2", **kwargs)
    assert first["output_digest"] == second["output_digest"]
    assert first["manifest_digest"] == second["manifest_digest"]
    report = t.evaluate_sample(tmp / "run1" / "x_res.ppm", ds, 0)
    for key in ("ssim_bg", "ssim_fg", "content_similarity", "style_proxy"):
        assert key in report
    assert 0.0 <= report["content_similarity"] <= 1.0


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--profile", default="release", choices=["release", "debug"])
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as scratch_str:
        scratch = Path(scratch_str)
        module = import_module(locate_library(args.profile), scratch)
        failures = 0
        for name, fn in CHECKS:
            try:
                fn(module, scratch)
            except Exception as exc:  # noqa: BLE001
                failures += 1
                print(f"FAIL  {name}: {exc}")
            else:
                print(f"ok    {name}")
        if failures:
            sys.exit(f"{failures} smoke check(s) failed")
        print(f"all {len(CHECKS)} smoke checks passed")


if __name__ == "__main__":
    main()
