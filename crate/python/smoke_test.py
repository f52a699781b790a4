#!/usr/bin/env python3
"""End-to-end smoke test for the nextlocmoe_py extension module.

Builds the cdylib with cargo if it is missing, loads it directly (no wheel),
then walks the full workflow: generate a city, save/load it, train a tiny
model, predict, evaluate, checkpoint round-trip, and zero-shot transfer.

Run from anywhere inside the repository:

    python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
LIB_NAMES = ["libnextlocmoe_py.so", "libnextlocmoe_py.dylib", "nextlocmoe_py.dll"]


def find_cdylib() -> Path:
    candidates = []
    for profile in ("debug", "release"):
        for name in LIB_NAMES:
            candidates.append(REPO / "target" / profile / name)
    for path in candidates:
        if path.exists():
            return path
    print("cdylib not found, building with cargo ...")
    subprocess.run(
        ["cargo", "build", "-p", "nextlocmoe-py"], cwd=REPO, check=True
    )
    for path in candidates:
        if path.exists():
            return path
    raise SystemExit("cargo build succeeded but no cdylib was produced")


def import_module(workdir: Path):
    lib = find_cdylib()
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    target = workdir / f"nextlocmoe_py{suffix}"
    shutil.copy2(lib, target)
    sys.path.insert(0, str(workdir))
    import nextlocmoe_py  # noqa: E402

    return nextlocmoe_py


def main() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="nextlocmoe-smoke-"))
    m = import_module(tmp)
    print(f"loaded module: {m.__name__}")
    assert len(m.FUNCTION_CATEGORIES) == 5, m.FUNCTION_CATEGORIES
    assert len(m.USER_GROUPS) == 11, m.USER_GROUPS

    # --- dataset: generate, persist, reload, normalize -------------------
    city = m.generate_city(locations=80, users=12, days=10, grid=12, seed=11)
    print(repr(city))
    assert city.n_users == 12
    assert city.n_locations == 80
    assert city.n_records > 0
    assert not city.is_normalized

    ds_dir = tmp / "city"
    city.save(ds_dir)
    reloaded = m.Dataset.load(ds_dir)
    assert reloaded.n_records == city.n_records
    assert reloaded.n_users == city.n_users

    norm = reloaded.normalize()
    assert norm.is_normalized
    users = norm.users()
    assert len(users) == 12

    # --- model: construct with overrides, train briefly ------------------
    model = m.Model(
        profile="desk",
        seed=3,
        overrides={"history_len": 8, "current_len": 3, "n_lower_layers": 1, "n_moe_layers": 1},
    )
    print(repr(model))
    cfg = model.config()
    assert cfg["history_len"] == 8
    assert cfg["func_top_k"] == 2
    assert cfg["confidence_threshold"] == 0.8
    assert model.n_trainable_parameters < model.n_parameters

    try:
        m.Model(profile="desk", seed=0, overrides={"d_modle": 4})
    except KeyError as exc:
        assert "d_modle" in str(exc)
    else:
        raise SystemExit("bad override key was not rejected")

    report = model.train(norm, epochs=2, batch_size=8, lr=1e-3, seed=3)
    assert len(report["epochs"]) == 2
    first, last = report["epochs"][0], report["epochs"][-1]
    assert math.isfinite(last["train_loss"])
    print(
        f"train: loss {first['train_loss']:.4f} -> {last['train_loss']:.4f}, "
        f"best val dist {report['best_val_dist']:.4f}"
    )

    # --- predict ----------------------------------------------------------
    pred = model.predict(norm, users[0], index=0, top=5)
    assert pred["user"] == users[0]
    assert len(pred["candidates"]) == 5
    d2s = [c["d2"] for c in pred["candidates"]]
    assert d2s == sorted(d2s), "candidates must be ordered by distance"
    print(f"predict: user {pred['user']} -> loc {pred['candidates'][0]['loc_id']} "
          f"(target {pred['target_loc']})")

    # --- evaluate ----------------------------------------------------------
    ev = model.evaluate(norm, ks=[1, 5, 10], split="test", seed=3)
    assert set(ev["hit_at"].keys()) == {"1", "5", "10"}
    hits = {int(k): v for k, v in ev["hit_at"].items()}
    assert 0.0 <= hits[1] <= hits[5] <= hits[10] <= 1.0
    print(f"evaluate: hit@k {hits} over {ev['n_samples']} windows")

    # --- checkpoint round-trip ---------------------------------------------
    ckpt = tmp / "model.ckpt"
    model.save(ckpt)
    again = m.Model.load(ckpt)
    assert again.checksum == model.checksum, "checkpoint round-trip changed weights"
    ev2 = again.evaluate(norm, ks=[1, 5, 10], split="test", seed=3)
    assert ev2["hit_at"] == ev["hit_at"]
    print(f"checkpoint: checksum {model.checksum[:16]}... stable")

    # --- zero-shot transfer to an unseen city -------------------------------
    city_b = m.generate_city(locations=60, users=8, days=10, grid=10, seed=99,
                             name="city-b")
    tr = model.transfer_eval(city_b.normalize(), ks=[1, 5, 10])
    assert tr["checksum"] == model.checksum
    assert abs(tr["random_baseline"]["10"] - 10 / 60) < 1e-12
    print(f"transfer: hit@10 {tr['eval']['hit_at']['10']:.3f} "
          f"(random {tr['random_baseline']['10']:.3f})")

    # --- routing statistics --------------------------------------------------
    act = model.activation_report(norm)
    assert act["n_moe_layers"] == 1
    assert 1.0 <= act["mean_activated"] <= 11.0
    assert act["mean_entropy"] <= math.log(11) + 1e-9
    print(f"activation: mean experts {act['mean_activated']:.2f}, "
          f"entropy {act['mean_entropy']:.3f}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
