import csv
import json
import struct

import numpy as np
import pytest

from mdra.cli import main
from mdra.config import ExperimentConfig
from mdra.io import (
    HEADER,
    ConfigMismatchError,
    FormatError,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from mdra.scenarios.cf import CfConfig, sample_cf_instance
from mdra.scenarios.ma import MaConfig, sample_ma_instance

TINY_MODEL = {"d_h": 8, "beamformer_width": 8, "encoder_layers": 1, "context_layers": 1,
              "beamformer_layers": 1, "critic_layers": 1, "heads": 2, "batch_norm": False}


def write_config(tmp_path, scenario, system, epochs=2, **extra):
    raw = {
        "scenario": scenario,
        "system": system,
        "model": TINY_MODEL,
        "train": {"epochs": epochs, "steps_per_epoch": 2, "batch_size": 8, "lr": 1e-3},
        "data": {"train": 16, "val": 8, "test": 6},
        "seed": 3,
        **extra,
    }
    path = tmp_path / f"{scenario}.json"
    path.write_text(json.dumps(raw))
    return path


CF_SYS = {"L": 2, "K": 3, "M": 2, "k_max": 2, "l_max": 1, "p_max_dbm": 10, "noise_dbm": -100}
MA_SYS = {"side": 3, "M": 2, "K": 2, "d_min": 0.07, "p_max_dbm": 10}


def test_dataset_round_trip_is_bitwise(tmp_path, rng):
    for inst in (sample_cf_instance(CfConfig(L=2, K=3, M=2, k_max=1, l_max=1), rng, 5),
                 sample_ma_instance(MaConfig(side=3, M=2, K=2), rng, 5)):
        p = tmp_path / "d.mdra"
        write_dataset(p, inst, 42)
        _, back, seed = read_dataset(p)
        assert seed == 42 and back.h.tobytes() == inst.h.tobytes()
        coords = back.positions if hasattr(back, "positions") else back.ap_pos
        assert coords.tobytes() == (inst.positions if hasattr(inst, "positions") else inst.ap_pos).tobytes()


def test_payload_sizes(tmp_path, rng):
    p = tmp_path / "cf.mdra"
    write_dataset(p, sample_cf_instance(CfConfig(), rng, 2), 0)
    per_sample = (p.stat().st_size - HEADER.size) // 8 // 2
    assert per_sample == 2 * 8 + 2 * 20 + 2 * 640          # 640 complex channel entries
    p = tmp_path / "ma.mdra"
    write_dataset(p, sample_ma_instance(MaConfig(side=7, K=4), rng, 2), 0)
    assert (p.stat().st_size - HEADER.size) // 8 // 2 == 2 * (4 * 49) + 2 * 49


def test_dataset_rejects_corruption(tmp_path, rng):
    p = tmp_path / "d.mdra"
    write_dataset(p, sample_ma_instance(MaConfig(side=2, M=1, K=1), rng, 2), 0)
    raw = p.read_bytes()
    p.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(FormatError):
        read_dataset(p)
    p.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_dataset(p)


def test_checkpoint_round_trip_and_hash(tmp_path):
    arrays = {"a/w": np.arange(6.0).reshape(2, 3), "b": np.array(2.5)}
    p = tmp_path / "m.ckpt"
    write_checkpoint(p, {"x": 1}, "ab" * 32, arrays, {"epoch": 4})
    cfg, h, back, meta = read_checkpoint(p, "ab" * 32)
    assert cfg == {"x": 1} and meta == {"epoch": 4} and h == "ab" * 32
    assert all(back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes() for k, v in arrays.items())
    with pytest.raises(ConfigMismatchError):
        read_checkpoint(p, "cd" * 32)


def test_config_hash_depends_on_system_only(tmp_path):
    a = ExperimentConfig.load(write_config(tmp_path, "cf", CF_SYS))
    assert a.system_hash() == a.with_seed(9).system_hash()
    b = ExperimentConfig.load(write_config(tmp_path, "cf", {**CF_SYS, "K": 4}))
    assert a.system_hash() != b.system_hash()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"scenario": "cf", "bogus": 1})


def test_gen_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, "ma", MA_SYS)
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.mdra").read_bytes() == (tmp_path / "b" / f"{split}.mdra").read_bytes()
    main(["gen", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "c")])
    assert (tmp_path / "a" / "train.mdra").read_bytes() != (tmp_path / "c" / "train.mdra").read_bytes()


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_train_eval_resume_and_check(tmp_path):
    cfg = write_config(tmp_path, "cf", CF_SYS, epochs=3)
    data = tmp_path / "data"
    main(["gen", "--config", str(cfg), "--out", str(data)])
    full = tmp_path / "full"
    main(["train", "--config", str(cfg), "--data", str(data), "--out", str(full)])
    rows = read_rows(full / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert (full / "metrics.svg").exists() and (full / "assoc.svg").exists()

    part = tmp_path / "part"
    main(["train", "--config", str(cfg), "--data", str(data), "--out", str(part), "--epochs", "1"])
    main(["train", "--config", str(cfg), "--data", str(data), "--out", str(part), "--resume", str(part / "model.ckpt")])
    assert read_rows(part / "metrics.csv") == rows

    main(["eval", "--config", str(cfg), "--data", str(data), "--out", str(full), "--checkpoint", str(full / "model.ckpt")])
    res = {r["method"]: r for r in read_rows(full / "results.csv")}
    assert set(res) == {"learned", "greedy+wmmse", "random+cvln", "brute-force"}
    assert float(res["learned"]["feasibility"]) == 1.0
    best = float(res["brute-force"]["mean_rate"])
    assert all(best >= float(r["mean_rate"]) - 1e-9 for m, r in res.items() if m != "random+cvln")
    assert main(["check", "--config", str(cfg), "--checkpoint", str(full / "model.ckpt"), "--data", str(data), "--samples", "200"]) == 0

    other = write_config(tmp_path, "cf", {**CF_SYS, "K": 4})
    with pytest.raises(ConfigMismatchError):
        main(["eval", "--config", str(other), "--out", str(full), "--checkpoint", str(full / "model.ckpt")])
    with pytest.raises(SystemExit):
        main(["eval", "--config", str(cfg), "--out", str(full), "--methods", "nope"])


def test_sweep_rows_and_plot(tmp_path):
    cfg = write_config(tmp_path, "ma", MA_SYS)
    out = tmp_path / "sweep"
    main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", "p_max", "--values", "0,10,20",
          "--methods", "greedy+wmmse,greedy+zf"])
    rows = read_rows(out / "results.csv")
    assert len(rows) == 2 * 3
    assert [float(r["value"]) for r in rows if r["method"] == "greedy+zf"] == [0.0, 10.0, 20.0]
    assert (out / "sweep_p_max.svg").exists()
    with pytest.raises(SystemExit):
        main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", "N", "--values", "10", "--methods", "greedy+zf"])
