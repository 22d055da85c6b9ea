import json
import re
from pathlib import Path

import numpy as np
import pytest

from pcmu.cli import derive_seed, main

TINY_TOML = """
[env]
horizon_t = 24

[train]
episodes = 8
batch_size = 32
buffer_capacity = 2000
sync_every = 60
hidden_width = 16

[privacy]
n_bins = 8
hnet_lstm_width = 8
hnet_hidden_width = 16
refresh_batches = 2
episode_batch_size = 8
step_batch_size = 32

[attacker]
epochs = 5
patience = 2

[data.synthetic]
n_episodes = 40
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(TINY_TOML)
    return path


def _strip_wall_ms(text: str) -> str:
    lines = text.splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines)


class TestExitCodes:
    def test_unknown_option_is_usage_error(self, capsys):
        assert main(["train", "--no-such-flag"]) == 1

    def test_unknown_config_key_is_validation_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nbogus_key = 3\n")
        code = main(["train", "--config", str(bad),
                     "--out-checkpoint", str(tmp_path / "x.ckpt")])
        assert code == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_missing_file_is_usage_error(self, tmp_path):
        assert main(["evaluate", "--checkpoint",
                     str(tmp_path / "none.ckpt"), "--out",
                     str(tmp_path / "out")]) == 1

    def test_corrupt_checkpoint_is_data_error(self, tmp_path):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"JUNK" * 30)
        assert main(["evaluate", "--checkpoint", str(junk), "--out",
                     str(tmp_path / "out")]) == 2

    def test_bad_lambda_list(self, tiny_config, tmp_path):
        assert main(["sweep", "--config", str(tiny_config),
                     "--lambdas", "0,zebra", "--out",
                     str(tmp_path / "s.csv")]) == 1


class TestPipeline:
    def test_end_to_end(self, tiny_config, tmp_path, capsys):
        # gen-data
        data_csv = tmp_path / "episodes.csv"
        assert main(["gen-data", "--config", str(tiny_config), "--out",
                     str(data_csv)]) == 0
        header = data_csv.read_text().splitlines()[0]
        assert header == "timestamp,power_kw,occupancy"

        # train (flatness at lambda 0.5 exercises the config routing)
        ckpt = tmp_path / "model.ckpt"
        log = tmp_path / "train.csv"
        assert main(["train", "--config", str(tiny_config),
                     "--lambda", "0.5", "--backend", "flatness",
                     "--out-checkpoint", str(ckpt), "--log", str(log)]) == 0
        rows = log.read_text().splitlines()
        assert rows[0] == "episode,total_reward,epsilon,hnet_loss,wall_ms"
        assert len(rows) == 9
        manifest = json.loads((tmp_path / "model.ckpt.manifest.json")
                              .read_text())
        assert manifest["command"] == "train"
        assert manifest["args"]["backend"] == "flatness"
        assert manifest["args"]["lambda"] == 0.5
        from pcmu.data import load_checkpoint
        assert load_checkpoint(ckpt).meta["backend"] == "flatness"
        assert load_checkpoint(ckpt).meta["lambda"] == 0.5

        # evaluate
        eval_dir = tmp_path / "eval"
        assert main(["evaluate", "--checkpoint", str(ckpt), "--split",
                     "test", "--out", str(eval_dir)]) == 0
        traj_csv = eval_dir / "trajectories.csv"
        assert traj_csv.exists()
        metrics = (eval_dir / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "split,n_episodes,cost_per_day,ksg_mi_nats"

        # attack (internal split needs >= 10 episodes; test split has 4,
        # so attack the training-split trajectories instead)
        eval_train = tmp_path / "eval_train"
        assert main(["evaluate", "--checkpoint", str(ckpt), "--split",
                     "train", "--out", str(eval_train)]) == 0
        attack_csv = tmp_path / "attack.csv"
        assert main(["attack", "--trajectories",
                     str(eval_train / "trajectories.csv"), "--which",
                     "occupancy", "--out", str(attack_csv)]) == 0
        lines = attack_csv.read_text().splitlines()
        assert lines[0] == ("which,n_train,n_eval,normalized_error,"
                            "balanced_accuracy")
        assert lines[1].startswith("occupancy,")

        # estimate-mi on the trajectories
        mi_csv = tmp_path / "mi.csv"
        assert main(["estimate-mi", "--trajectories",
                     str(eval_train / "trajectories.csv"), "--k", "3",
                     "--out", str(mi_csv)]) == 0
        assert mi_csv.read_text().splitlines()[0] == "source,n,k,mi_nats"

        # psd
        psd_csv = tmp_path / "psd.csv"
        assert main(["psd", "--trajectory",
                     str(eval_train / "trajectories.csv"), "--segment", "16",
                     "--out", str(psd_csv)]) == 0
        assert psd_csv.read_text().splitlines()[0] == "frequency,power"

    def test_gen_data_roundtrips_through_csv_source(self, tiny_config,
                                                    tmp_path):
        data_csv = tmp_path / "episodes.csv"
        assert main(["gen-data", "--config", str(tiny_config), "--out",
                     str(data_csv)]) == 0
        cfg_csv = tmp_path / "csv_config.toml"
        cfg_csv.write_text(TINY_TOML + f"""
[data]
source = "csv"
path = "{data_csv}"
""")
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--config", str(cfg_csv), "--backend",
                     "flatness", "--out-checkpoint", str(ckpt)]) == 0

    def test_estimate_mi_pairs(self, tmp_path):
        rng = np.random.default_rng(0)
        xy = rng.multivariate_normal([0, 0], [[1, .9], [.9, 1]], size=1500)
        pairs = tmp_path / "pairs.csv"
        pairs.write_text("x,y\n" + "\n".join(
            f"{float(a)!r},{float(b)!r}" for a, b in xy))
        out = tmp_path / "mi.csv"
        assert main(["estimate-mi", "--pairs", str(pairs), "--out",
                     str(out)]) == 0
        row = out.read_text().splitlines()[1].split(",")
        assert row[0] == "pairs" and row[1] == "1500" and row[2] == "4"
        assert float(row[3]) == pytest.approx(0.83, abs=0.15)


class TestDeterminism:
    def test_train_rerun_identical(self, tiny_config, tmp_path):
        outs = []
        for tag in ("a", "b"):
            ckpt = tmp_path / f"{tag}.ckpt"
            log = tmp_path / f"{tag}.csv"
            assert main(["train", "--config", str(tiny_config),
                         "--backend", "mi-general", "--seed", "7",
                         "--out-checkpoint", str(ckpt),
                         "--log", str(log)]) == 0
            outs.append((ckpt.read_bytes(), log.read_text()))
        assert outs[0][0] == outs[1][0]
        assert _strip_wall_ms(outs[0][1]) == _strip_wall_ms(outs[1][1])

    def test_rerun_from_manifest_identical(self, tiny_config, tmp_path):
        ckpt = tmp_path / "first.ckpt"
        assert main(["train", "--config", str(tiny_config), "--backend",
                     "flatness", "--seed", "3", "--out-checkpoint",
                     str(ckpt)]) == 0
        manifest = tmp_path / "first.ckpt.manifest.json"
        ckpt2 = tmp_path / "second.ckpt"
        assert main(["train", "--config", str(manifest), "--backend",
                     "flatness", "--seed", "3", "--out-checkpoint",
                     str(ckpt2)]) == 0
        assert ckpt.read_bytes() == ckpt2.read_bytes()

    def test_sweep_jobs_do_not_change_rows(self, tiny_config, tmp_path):
        csvs = []
        for jobs, tag in ((1, "serial"), (2, "parallel")):
            out = tmp_path / f"{tag}.csv"
            assert main(["sweep", "--config", str(tiny_config),
                         "--lambdas", "0.5,1.0", "--backends", "flatness",
                         "--jobs", str(jobs), "--seed", "5",
                         "--out", str(out)]) == 0
            csvs.append(out.read_text())
        assert csvs[0] == csvs[1]
        header = csvs[0].splitlines()[0]
        assert header == ("lambda,backend,seed,episodes,cost_per_day,"
                          "ksg_mi_nats,load_nmse,occ_balanced_acc")

    def test_gen_data_rerun_identical(self, tiny_config, tmp_path):
        texts = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.csv"
            assert main(["gen-data", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
            texts.append(out.read_text())
        assert texts[0] == texts[1]


class TestEnvVars:
    def test_flag_via_environment(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("PCMU_TRAIN_BACKEND", "flatness")
        ckpt = tmp_path / "env.ckpt"
        assert main(["train", "--config", str(tiny_config),
                     "--out-checkpoint", str(ckpt)]) == 0
        from pcmu.data import load_checkpoint
        assert load_checkpoint(ckpt).meta["backend"] == "flatness"


class TestSeedDerivation:
    def test_stable_and_distinct(self):
        a = derive_seed(5, "0.5", "flatness")
        b = derive_seed(5, "0.5", "flatness")
        c = derive_seed(5, "0.5", "mi-general")
        assert a == b
        assert a != c
        assert 0 <= a < 2 ** 63
