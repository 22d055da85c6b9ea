"""Command-line entry point.

Subcommands cover the whole pipeline: synthetic data generation, training,
trade-off sweeps over the cost/privacy weight, policy evaluation, attacker
fits, mutual-information estimation, and spectral export.  Every command
writes a manifest (resolved config + version + seed) next to its primary
output; re-running with ``--config <manifest>`` reproduces the outputs.

Exit codes: 0 success, 1 usage error, 2 data or validation error.  All
flags can also be set through environment variables prefixed ``PCMU_``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timedelta
from pathlib import Path

import click
import numpy as np

import pcmu
from pcmu import agent as agentmod
from pcmu import attackers as atkmod
from pcmu import data as datamod
from pcmu import env as envmod
from pcmu import mi as mimod
from pcmu.config import PRIVACY_BACKENDS, RunConfig
from pcmu.errors import PcmuError, ConfigError, DataError
from pcmu.nn import backend as nn_backend

TRADEOFF_HEADER = ("lambda,backend,seed,episodes,cost_per_day,ksg_mi_nats,"
                   "load_nmse,occ_balanced_acc")
TRAIN_LOG_HEADER = "episode,total_reward,epsilon,hnet_loss,wall_ms"
TRAJECTORY_HEADER = "episode,t,y_kw,b_kw,z_kw,level,cost,occupancy"


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from string parts (master seed, lambda, backend)."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.load(path)


def _dataset(cfg: RunConfig):
    if cfg.data.source == "synthetic":
        episodes = datamod.generate_synthetic(cfg.data.synthetic, cfg.env)
    else:
        records = datamod.load_csv(cfg.data.path)
        episodes, _dropped = datamod.resample_to_episodes(records, cfg.env)
    if not episodes:
        raise DataError("dataset is empty")
    return episodes


def _split(cfg: RunConfig):
    return datamod.split_dataset(_dataset(cfg), cfg.data.split_seed)


def _write_manifest(primary_out, command: str, cfg: RunConfig, seed,
                    args: dict, outputs) -> Path:
    path = Path(f"{primary_out}.manifest.json")
    doc = {
        "command": command,
        "version": pcmu.__version__,
        "kernel_backend": nn_backend.name(),
        "seed": seed,
        "args": args,
        "config": cfg.to_dict(),
        "outputs": [str(o) for o in outputs],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _write_trajectories(path, trajectories) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for ep_idx, traj in enumerate(trajectories):
            for t in range(len(traj.y_seq)):
                occ = ("" if traj.occupancy_seq is None
                       else int(traj.occupancy_seq[t]))
                fh.write(",".join([
                    str(ep_idx), str(t + 1), _fmt(float(traj.y_seq[t])),
                    _fmt(float(traj.b_seq[t])), _fmt(float(traj.z_seq[t])),
                    _fmt(float(traj.l_seq[t + 1])),
                    _fmt(float(traj.cost_seq[t])), str(occ),
                ]) + "\n")


def _read_trajectories(path):
    """Trajectory CSV -> (y (N,T), z (N,T), occupancy (N,T) or None)."""
    episodes: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        need = {"episode", "t", "y_kw", "z_kw"}
        if not need.issubset(cols):
            raise DataError(f"{path}: not a trajectory CSV (header {header!r})")
        idx = {name: cols.index(name) for name in cols}
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                ep = int(parts[idx["episode"]])
                t = int(parts[idx["t"]])
                y = float(parts[idx["y_kw"]])
                z = float(parts[idx["z_kw"]])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            occ = None
            if "occupancy" in idx and parts[idx["occupancy"]] != "":
                occ = int(parts[idx["occupancy"]])
            episodes.setdefault(ep, []).append((t, y, z, occ))
    if not episodes:
        raise DataError(f"{path}: no trajectory rows")
    ys, zs, occs = [], [], []
    for ep in sorted(episodes):
        rows = sorted(episodes[ep])
        ys.append([r[1] for r in rows])
        zs.append([r[2] for r in rows])
        occs.append([r[3] for r in rows])
    y = np.asarray(ys)
    z = np.asarray(zs)
    occ = None
    if all(o is not None for row in occs for o in row):
        occ = np.asarray(occs, dtype=np.int64)
    return y, z, occ


def _greedy_rollouts(bundle, cfg: RunConfig, episodes, seed: int):
    qnet, _ = agentmod.qnet_from_bundle(bundle)
    policy = agentmod.greedy_policy(qnet, cfg)
    out = []
    for i, ep in enumerate(episodes):
        rng = np.random.default_rng(derive_seed(seed, "rollout", i))
        out.append(envmod.rollout(policy, ep.y, cfg.env, cfg.battery,
                                  cfg.tariff, rng, occupancy=ep.occupancy))
    return out


@click.group()
def cli():
    """Privacy-cost management for smart-meter loads."""


@cli.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Run configuration (TOML or JSON).")
@click.option("--seed", type=int, default=None,
              help="Override the generator seed.")
@click.option("--out", required=True, type=click.Path(),
              help="Output load CSV.")
def cmd_gen_data(config_path, seed, out):
    """Generate synthetic household load episodes as a load CSV."""
    cfg = _load_config(config_path)
    if seed is not None:
        cfg = cfg.replace(data=dataclasses.replace(
            cfg.data, synthetic=dataclasses.replace(cfg.data.synthetic,
                                                    seed=seed)))
    episodes = datamod.generate_synthetic(cfg.data.synthetic, cfg.env)
    records = []
    base = datetime(2024, 1, 1)
    for day, ep in enumerate(episodes):
        for t in range(cfg.env.horizon_t):
            ts = base + timedelta(days=day,
                                  hours=cfg.env.episode_start_hour
                                  + t * cfg.env.delta_t)
            occ = None if ep.occupancy is None else int(ep.occupancy[t])
            records.append(datamod.LoadCsvRecord(ts, float(ep.y[t]), occ))
    datamod.write_csv(out, records)
    _write_manifest(out, "gen-data", cfg, cfg.data.synthetic.seed,
                    {"out": str(out)}, [out])
    click.echo(f"wrote {len(records)} records ({len(episodes)} episodes) to {out}")


def _apply_train_overrides(cfg: RunConfig, lam, backend, seed) -> RunConfig:
    train = cfg.train
    privacy = cfg.privacy
    if lam is not None:
        train = dataclasses.replace(train, lambda_weight=lam)
    if seed is not None:
        train = dataclasses.replace(train, seed=seed)
    if backend is not None:
        privacy = dataclasses.replace(privacy, backend=backend)
    return cfg.replace(train=train, privacy=privacy)


def _write_train_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRAIN_LOG_HEADER + "\n")
        for row in rows:
            fh.write(",".join([
                str(row.episode), _fmt(row.total_reward), _fmt(row.epsilon),
                _fmt(row.hnet_loss), f"{row.wall_ms:.3f}",
            ]) + "\n")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--lambda", "lam", type=float, default=None,
              help="Cost/privacy trade-off weight in [0,1].")
@click.option("--backend", type=click.Choice(PRIVACY_BACKENDS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out-checkpoint", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Per-episode training log CSV.")
def cmd_train(config_path, lam, backend, seed, out_checkpoint, log_path):
    """Train one controller and save its checkpoint."""
    cfg = _apply_train_overrides(_load_config(config_path), lam, backend, seed)
    split = _split(cfg)
    result = agentmod.train_run(cfg, split.train)
    datamod.save_checkpoint(out_checkpoint, result.bundle)
    outputs = [out_checkpoint]
    if log_path:
        _write_train_log(log_path, result.log)
        outputs.append(log_path)
    _write_manifest(out_checkpoint, "train", cfg, cfg.train.seed,
                    {"lambda": cfg.train.lambda_weight,
                     "backend": cfg.privacy.backend,
                     "out_checkpoint": str(out_checkpoint),
                     "log": str(log_path) if log_path else None}, outputs)
    click.echo(f"trained {cfg.privacy.backend} lambda={cfg.train.lambda_weight} "
               f"for {cfg.train.episodes} episodes -> {out_checkpoint}")


def _tradeoff_point(cfg_doc: dict, lam: float, backend: str,
                    point_seed: int) -> dict:
    """Train and fully evaluate one (lambda, backend) point.

    BLAS is pinned to one thread so results are bitwise independent of
    the worker count (thread count changes reduction order), and so
    parallel points do not oversubscribe each other.
    """
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        return _tradeoff_point_limited(cfg_doc, lam, backend, point_seed)


def _tradeoff_point_limited(cfg_doc: dict, lam: float, backend: str,
                            point_seed: int) -> dict:
    cfg = RunConfig.from_dict(cfg_doc)
    cfg = _apply_train_overrides(cfg, lam, backend, point_seed)
    split = _split(cfg)
    result = agentmod.train_run(cfg, split.train)
    bundle = result.bundle
    run_cfg = RunConfig.from_dict(bundle.config)

    rolls = {name: _greedy_rollouts(bundle, run_cfg, eps, point_seed)
             for name, eps in (("train", split.train), ("val", split.val),
                               ("test", split.test))}
    test = rolls["test"]
    cost = float(np.mean([envmod.billed_cost(tr, run_cfg.tariff, run_cfg.env)
                          for tr in test]))
    y_mat = np.stack([tr.y_seq for tr in test])
    z_mat = np.stack([tr.z_seq for tr in test])
    mi_est = mimod.ksg_mi(y_mat, z_mat, mimod.KsgConfig(),
                          rng=np.random.default_rng(derive_seed(point_seed, "mi")))

    def arrays(trajs, attr):
        return np.stack([getattr(tr, attr) for tr in trajs])

    atk_rng = np.random.default_rng(derive_seed(point_seed, "attacker"))
    load_model = atkmod.train_load_attacker(
        arrays(rolls["train"], "z_seq"), arrays(rolls["train"], "y_seq"),
        arrays(rolls["val"], "z_seq"), arrays(rolls["val"], "y_seq"),
        cfg.attacker, atk_rng)
    load_err = atkmod.eval_load_attacker(load_model, z_mat, y_mat)

    occ_acc = None
    if all(tr.occupancy_seq is not None for trajs in rolls.values()
           for tr in trajs):
        occ_model = atkmod.train_occupancy_attacker(
            arrays(rolls["train"], "z_seq"),
            arrays(rolls["train"], "occupancy_seq"),
            arrays(rolls["val"], "z_seq"),
            arrays(rolls["val"], "occupancy_seq"),
            cfg.attacker, atk_rng)
        occ_acc = atkmod.eval_occupancy_attacker(
            occ_model, z_mat, arrays(test, "occupancy_seq"))
    return {"lambda": lam, "backend": backend, "seed": point_seed,
            "episodes": cfg.train.episodes, "cost_per_day": cost,
            "ksg_mi_nats": mi_est, "load_nmse": load_err,
            "occ_balanced_acc": occ_acc}


def _tradeoff_point_star(args):
    return _tradeoff_point(*args)


@cli.command("sweep")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
              help="Comma-separated trade-off weights.")
@click.option("--backends", default="mi-general",
              help="Comma-separated privacy backends.")
@click.option("--jobs", type=int, default=1, help="Parallel workers.")
@click.option("--seed", type=int, default=0, help="Master seed.")
@click.option("--out", required=True, type=click.Path())
def cmd_sweep(config_path, lambdas, backends, jobs, seed, out):
    """Train and evaluate a grid of (lambda, backend) points."""
    cfg = _load_config(config_path)
    try:
        lams = [float(v) for v in lambdas.split(",") if v != ""]
    except ValueError as exc:
        raise click.UsageError(f"bad --lambdas value: {exc}")
    backend_list = [b.strip() for b in backends.split(",") if b.strip()]
    for b in backend_list:
        if b not in PRIVACY_BACKENDS:
            raise click.UsageError(
                f"unknown backend {b!r}; choose from {PRIVACY_BACKENDS}")
    if not lams or not backend_list:
        raise click.UsageError("need at least one lambda and one backend")
    cfg_doc = cfg.to_dict()
    tasks = [(cfg_doc, lam, b, derive_seed(seed, repr(float(lam)), b))
             for b in backend_list for lam in lams]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_tradeoff_point_star, tasks))
    else:
        rows = [_tradeoff_point(*t) for t in tasks]
    rows.sort(key=lambda r: (r["backend"], r["lambda"]))
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRADEOFF_HEADER + "\n")
        for r in rows:
            fh.write(",".join([
                _fmt(r["lambda"]), r["backend"], str(r["seed"]),
                str(r["episodes"]), _fmt(r["cost_per_day"]),
                _fmt(r["ksg_mi_nats"]), _fmt(r["load_nmse"]),
                _fmt(r["occ_balanced_acc"]),
            ]) + "\n")
    _write_manifest(out, "sweep", cfg, seed,
                    {"lambdas": lambdas, "backends": backends,
                     "out": str(out)}, [out])
    click.echo(f"wrote {len(rows)} trade-off rows to {out}")


@cli.command("evaluate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--split", "split_name",
              type=click.Choice(["train", "val", "test"]), default="test")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_evaluate(checkpoint, split_name, seed, out_dir):
    """Roll out the greedy policy of a checkpoint and score it."""
    bundle = datamod.load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(bundle.config)
    split = _split(cfg)
    episodes = getattr(split, split_name)
    trajectories = _greedy_rollouts(bundle, cfg, episodes, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / "trajectories.csv"
    _write_trajectories(traj_path, trajectories)
    cost = float(np.mean([envmod.billed_cost(tr, cfg.tariff, cfg.env)
                          for tr in trajectories]))
    y_mat = np.stack([tr.y_seq for tr in trajectories])
    z_mat = np.stack([tr.z_seq for tr in trajectories])
    mi_est = mimod.ksg_mi(y_mat, z_mat, mimod.KsgConfig(),
                          rng=np.random.default_rng(derive_seed(seed, "mi")))
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split,n_episodes,cost_per_day,ksg_mi_nats\n")
        fh.write(f"{split_name},{len(trajectories)},{_fmt(cost)},"
                 f"{_fmt(mi_est)}\n")
    _write_manifest(out / "run", "evaluate", cfg, seed,
                    {"checkpoint": str(checkpoint), "split": split_name,
                     "out": str(out_dir)}, [traj_path, metrics_path])
    click.echo(f"{split_name}: cost/day {cost:.4f}, MI {mi_est:.4f} nats")


@cli.command("attack")
@click.option("--trajectories", required=True, type=click.Path(exists=True),
              help="Trajectory CSV used for attacker training.")
@click.option("--eval-trajectories", type=click.Path(exists=True),
              default=None,
              help="Held-out trajectory CSV; defaults to an internal split.")
@click.option("--which", type=click.Choice(["load", "occupancy"]),
              required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
def cmd_attack(trajectories, eval_trajectories, which, seed, out):
    """Fit an attacker on trajectories and report its test metric."""
    y, z, occ = _read_trajectories(trajectories)
    if eval_trajectories is not None:
        y_eval, z_eval, occ_eval = _read_trajectories(eval_trajectories)
        n_val = max(1, len(y) // 6)
        order = np.random.default_rng(derive_seed(seed, "val")).permutation(len(y))
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        if len(y) < 10:
            raise DataError("need at least 10 episodes for an internal split")
        order = np.random.default_rng(derive_seed(seed, "split")).permutation(len(y))
        n_train = int(round(0.7 * len(y)))
        n_val = int(round(0.1 * len(y)))
        train_idx = order[:n_train]
        val_idx = order[n_train:n_train + n_val]
        test_idx = order[n_train + n_val:]
        y_eval, z_eval = y[test_idx], z[test_idx]
        occ_eval = None if occ is None else occ[test_idx]
    rng = np.random.default_rng(derive_seed(seed, "attack", which))
    from pcmu.config import AttackerSection
    atk_cfg = AttackerSection()
    nmse_val = None
    bal_acc = None
    if which == "load":
        model = atkmod.train_load_attacker(z[train_idx], y[train_idx],
                                           z[val_idx], y[val_idx],
                                           atk_cfg, rng)
        nmse_val = atkmod.eval_load_attacker(model, z_eval, y_eval)
    else:
        if occ is None or occ_eval is None:
            raise DataError("trajectories carry no occupancy labels")
        model = atkmod.train_occupancy_attacker(z[train_idx], occ[train_idx],
                                                z[val_idx], occ[val_idx],
                                                atk_cfg, rng)
        bal_acc = atkmod.eval_occupancy_attacker(model, z_eval, occ_eval)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("which,n_train,n_eval,normalized_error,balanced_accuracy\n")
        fh.write(f"{which},{len(train_idx)},{len(y_eval)},"
                 f"{_fmt(nmse_val)},{_fmt(bal_acc)}\n")
    cfg = RunConfig()
    _write_manifest(out, "attack", cfg, seed,
                    {"trajectories": str(trajectories),
                     "eval_trajectories": (str(eval_trajectories)
                                           if eval_trajectories else None),
                     "which": which, "out": str(out)}, [out])
    metric = nmse_val if nmse_val is not None else bal_acc
    click.echo(f"{which} attacker: {metric:.4f}")


@cli.command("estimate-mi")
@click.option("--trajectories", type=click.Path(exists=True), default=None,
              help="Trajectory CSV: MI between demand and grid sequences.")
@click.option("--pairs", type=click.Path(exists=True), default=None,
              help="Two-column CSV of scalar (x,y) samples.")
@click.option("--k", type=int, default=4, help="Neighbour count.")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
def cmd_estimate_mi(trajectories, pairs, k, seed, out):
    """k-NN mutual-information estimate of trajectories or sample pairs."""
    if (trajectories is None) == (pairs is None):
        raise click.UsageError("give exactly one of --trajectories/--pairs")
    ksg_cfg = mimod.KsgConfig(k_neighbors=k)
    rng = np.random.default_rng(derive_seed(seed, "mi"))
    if trajectories is not None:
        y, z, _occ = _read_trajectories(trajectories)
        est = mimod.ksg_mi(y, z, ksg_cfg, rng=rng)
        source, n = "trajectories", len(y)
    else:
        raw = np.genfromtxt(pairs, delimiter=",", names=True)
        names = raw.dtype.names
        if names is None or len(names) != 2:
            raise DataError(f"{pairs}: expected a two-column CSV with header")
        x = np.asarray(raw[names[0]], dtype=np.float64)
        yv = np.asarray(raw[names[1]], dtype=np.float64)
        est = mimod.ksg_mi(x, yv, ksg_cfg, rng=rng)
        source, n = "pairs", len(x)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("source,n,k,mi_nats\n")
        fh.write(f"{source},{n},{k},{_fmt(est)}\n")
    _write_manifest(out, "estimate-mi", RunConfig(), seed,
                    {"trajectories": trajectories, "pairs": pairs, "k": k,
                     "out": str(out)}, [out])
    click.echo(f"MI({source}, n={n}, k={k}) = {est:.4f} nats")


@cli.command("psd")
@click.option("--trajectory", required=True, type=click.Path(exists=True))
@click.option("--episode", "episode_idx", type=int, default=0)
@click.option("--signal", "signal_name",
              type=click.Choice(["z", "y"]), default="z")
@click.option("--segment", type=int, default=32)
@click.option("--out", required=True, type=click.Path())
def cmd_psd(trajectory, episode_idx, signal_name, segment, out):
    """Welch power spectral density of one rolled-out episode."""
    y, z, _occ = _read_trajectories(trajectory)
    if not 0 <= episode_idx < len(y):
        raise DataError(f"episode {episode_idx} out of range (have {len(y)})")
    sig = (z if signal_name == "z" else y)[episode_idx]
    freqs, power = mimod.welch_psd(sig, mimod.PsdConfig(segment_length=segment))
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("frequency,power\n")
        for f, p in zip(freqs, power):
            fh.write(f"{_fmt(float(f))},{_fmt(float(p))}\n")
    _write_manifest(out, "psd", RunConfig(), 0,
                    {"trajectory": str(trajectory), "episode": episode_idx,
                     "signal": signal_name, "segment": segment,
                     "out": str(out)}, [out])
    click.echo(f"wrote {len(freqs)} PSD bins to {out}")


def main(argv=None) -> int:
    """Entry point with explicit exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False,
                 auto_envvar_prefix="PCMU")
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except (ConfigError, DataError, PcmuError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
