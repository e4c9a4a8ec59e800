"""``advflat`` command line: dataset-gen, train, attack, eval, analyze, report.

Config files are YAML documents (``version: 1``) with the sections below; every
key is optional and unknown keys are rejected. Command-line flags override
file values. One master ``seed`` drives the dataset, model initialisation,
training shuffles and attack sampling.

    version: 1
    seed: 0
    output_dir: runs
    dataset:    {d, C, n_per_class, cluster_spread, center_lo, center_hi,
                 min_center_gap, test_fraction}
    zoo:        [{model_id, hidden: [..], activation}, ...]
    train:      {learning_rate, epochs, batch_size, l2, standardize}
    attack:     {algo, eps, T, alpha, eta, N, xi, gamma_mcas, eta_mcas, beta_f,
                 lambda_f, scheme, neighbor_ascent, mcas_enabled,
                 mcas_reset_per_iteration, lo, hi}
    experiment: {algos: [afa, mi], chunk_size}

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .attacks import SCHEMES, AttackConfig, write_traces
from .flatness import check_vicinity_bound, estimate_flatness, loss_surface_grid
from .harness import (
    DEFAULT_CHUNK,
    DEFAULT_ZOO,
    Dataset,
    DatasetSpec,
    ExperimentConfig,
    ModelSpec,
    TransferReport,
    attack_examples,
    build_zoo,
    diversity_comparison,
    emit_report,
    fmt,
    make_synthetic_dataset,
    model_hash,
    rank_agreement,
    run_transfer_experiment,
    transfer_matrices,
    write_json,
)
from .models import TrainConfig, load_model, save_model
from .numerics import RNG_VERSION, SeededRng

CONFIG_VERSION = 1
ALGOS = ("afa", "mi", "fgsm")


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# config


def _names(cls, drop=()):
    return [f.name for f in fields(cls) if f.name not in drop]


SECTION_KEYS = {
    "dataset": _names(DatasetSpec, ("seed",)),
    "train": _names(TrainConfig, ("init_seed",)),
    "attack": ["algo", *_names(AttackConfig, ("seed",))],
    "experiment": ["algos", "chunk_size"],
}
TOP_KEYS = ("version", "seed", "output_dir", "zoo", *SECTION_KEYS)
ZOO_KEYS = ("model_id", "hidden", "activation")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    dataset: dict = field(default_factory=dict)
    zoo: list = field(default_factory=lambda: list(DEFAULT_ZOO))
    train: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(seed=self.seed, **self.dataset)

    def train_config(self) -> TrainConfig:
        return TrainConfig(init_seed=self.seed, **self.train)

    def algo(self) -> str:
        return self.attack.get("algo", "afa")

    def attack_config(self) -> AttackConfig:
        kw = {k: v for k, v in self.attack.items() if k != "algo"}
        return AttackConfig(seed=self.seed, **kw)

    def algos(self):
        return list(self.experiment.get("algos", ["afa", "mi"]))

    def chunk_size(self):
        return int(self.experiment.get("chunk_size", DEFAULT_CHUNK))

    def to_dict(self):
        """Effective configuration with every default filled in."""
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": {k: v for k, v in asdict(self.dataset_spec()).items() if k != "seed"},
            "zoo": [{"model_id": m.model_id, "hidden": list(m.hidden), "activation": m.activation} for m in self.zoo],
            "train": {k: v for k, v in asdict(self.train_config()).items() if k != "init_seed"},
            "attack": {"algo": self.algo(), **{k: v for k, v in self.attack_config().to_dict().items() if k != "seed"}},
            "experiment": {"algos": self.algos(), "chunk_size": self.chunk_size()},
        }


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping")
    for key in mapping:
        if key not in allowed:
            suffix = f" (in {where})" if where != "config" else ""
            raise ConfigError(f"unknown key: {key}{suffix}")


def parse_config(doc) -> RunConfig:
    doc = doc or {}
    _check_keys(doc, TOP_KEYS, "config")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version: {version}")
    cfg = RunConfig()
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or doc["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg.seed = doc["seed"]
    cfg.output_dir = str(doc.get("output_dir", cfg.output_dir))
    for section, allowed in SECTION_KEYS.items():
        values = doc.get(section) or {}
        _check_keys(values, allowed, section)
        setattr(cfg, section, dict(values))
    if "zoo" in doc:
        if not isinstance(doc["zoo"], list) or not doc["zoo"]:
            raise ConfigError("zoo must be a non-empty list")
        zoo = []
        for i, entry in enumerate(doc["zoo"]):
            _check_keys(entry, ZOO_KEYS, f"zoo[{i}]")
            if "model_id" not in entry:
                raise ConfigError(f"zoo[{i}] is missing key: model_id")
            zoo.append(ModelSpec(str(entry["model_id"]), tuple(entry.get("hidden", ())), entry.get("activation", "tanh")))
        ids = [m.model_id for m in zoo]
        if len(set(ids)) != len(ids):
            raise ConfigError("zoo model ids must be unique")
        cfg.zoo = zoo
    if cfg.algo() not in ALGOS:
        raise ConfigError(f"attack.algo must be one of {ALGOS}")
    for a in cfg.algos():
        if a not in ALGOS:
            raise ConfigError(f"experiment.algos entries must be among {ALGOS}")
    # surface type/range problems now, naming the section
    for section, build in (("dataset", cfg.dataset_spec), ("train", cfg.train_config), ("attack", cfg.attack_config)):
        try:
            build()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {section} section: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(doc)


# ----------------------------------------------------------------------------
# argument parsing


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="YAML run config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")


def _add_attack_flags(p):
    g = p.add_argument_group("attack hyperparameters (override the config file)")
    g.add_argument("--eps", type=float, help="L-inf budget (default 16/255)")
    g.add_argument("--T", "--iterations", dest="T", type=int, help="outer iterations (default 10)")
    g.add_argument("--alpha", type=float, help="step size (default eps/T)")
    g.add_argument("--eta", type=float, help="momentum decay (default 1.0)")
    g.add_argument("--n", "--N", dest="N", type=int, help="inner samples per iteration (default 20)")
    g.add_argument("--xi", type=float, help="sampling radius (default 3*eps)")
    g.add_argument("--gamma-mcas", dest="gamma_mcas", type=float, help="MCAS offset size (default 0.15*eps)")
    g.add_argument("--eta-mcas", dest="eta_mcas", type=float, help="MCAS gradient decay (default 0.9)")
    g.add_argument("--beta-f", dest="beta_f", type=float, help="zeroth/first order balance in [0,1] (default 0.5)")
    g.add_argument("--lambda-f", dest="lambda_f", type=float, help="flatness weight (default alpha*beta_f)")
    g.add_argument("--scheme", choices=SCHEMES, help="finite difference scheme (default fdm)")
    g.add_argument("--neighbor-ascent", dest="neighbor_ascent", action="store_true", default=None,
                   help="add neighbour gradients to the objective (default)")
    g.add_argument("--no-neighbor-ascent", dest="neighbor_ascent", action="store_false",
                   help="flatness-regularised gradient only")
    g.add_argument("--mcas", dest="mcas_enabled", action="store_true", default=None, help="enable MCAS (default)")
    g.add_argument("--no-mcas", dest="mcas_enabled", action="store_false", help="plain uniform inner sampling")
    g.add_argument("--mcas-reset", dest="mcas_reset_per_iteration", action="store_true", default=None,
                   help="reset the MCAS accumulator every iteration (default)")
    g.add_argument("--no-mcas-reset", dest="mcas_reset_per_iteration", action="store_false",
                   help="reset the MCAS accumulator only at t=0")
    g.add_argument("--lo", type=float, help="lower box bound (default 0)")
    g.add_argument("--hi", type=float, help="upper box bound (default 1)")


ATTACK_FLAG_KEYS = [k for k in SECTION_KEYS["attack"] if k != "algo"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advflat", description="Adversarial flatness attack toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset file to write (JSON)")

    p = sub.add_parser("train", help="train the model zoo")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="directory for the model files")
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = sub.add_parser("attack", help="attack the test split from one surrogate")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--models", required=True, help="directory written by `train`")
    p.add_argument("--surrogate", required=True, help="model id to attack")
    p.add_argument("--algo", choices=ALGOS, help="attack algorithm (default afa)")
    p.add_argument("--out", required=True, help="run directory")
    _add_attack_flags(p)

    p = sub.add_parser("eval", help="score adversarial runs against every model")
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--models", required=True, help="directory written by `train`")
    p.add_argument("--runs", nargs="+", required=True, help="run directories written by `attack`")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("analyze", help="landscape, flatness and sampling diagnostics")
    kinds = p.add_subparsers(dest="kind", required=True)
    for kind, text in (
        ("surface", "loss on a random 2-D slice around one example"),
        ("flatness", "sampled flatness estimates around one example"),
        ("vicinity", "brute-force check of the flatness vicinity bound"),
        ("diversity", "inner-sample loss spread, uniform vs MCAS"),
    ):
        k = kinds.add_parser(kind, help=text)
        _add_common(k)
        k.add_argument("--dataset", required=True, help="dataset file")
        k.add_argument("--model", required=True, help="model file")
        k.add_argument("--out", required=True, help="output file")
        if kind != "diversity":
            k.add_argument("--index", type=int, default=0, help="row of the test split (default 0)")
            k.add_argument("--adv", help="attack run directory; analyse its adversarial example instead")
        if kind == "surface":
            k.add_argument("--range", dest="range_", type=float, default=0.2, help="half-width of the slice")
            k.add_argument("--resolution", type=int, default=41, help="grid points per axis (odd)")
        if kind in ("flatness", "vicinity"):
            k.add_argument("--xi", type=float, help="radius (default 3*eps)")
            k.add_argument("--beta-f", dest="beta_f", type=float, default=0.5, help="balance in [0,1]")
        if kind == "flatness":
            k.add_argument("--n", dest="N", type=int, default=2000, help="samples")
        if kind == "vicinity":
            k.add_argument("--n-grid", dest="n_grid", type=int, default=101, help="lattice points per axis")
        if kind == "diversity":
            k.add_argument("--n-examples", type=int, default=50, help="test rows to attack")
            _add_attack_flags(k)

    p = sub.add_parser("report", help="full pipeline: dataset, zoo, transfer matrices for each algo")
    _add_common(p)
    p.add_argument("--out", help="report directory (default: config output_dir)")
    _add_attack_flags(p)
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg.seed = args.seed
    for key in ATTACK_FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg.attack[key] = value
    if getattr(args, "algo", None):
        cfg.attack["algo"] = args.algo
    if getattr(args, "epochs", None) is not None:
        cfg.train["epochs"] = args.epochs
    try:
        cfg.attack_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "threads", 1) < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


# ----------------------------------------------------------------------------
# file helpers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_dataset(path) -> Dataset:
    try:
        return Dataset.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise RuntimeError(f"cannot read dataset {path}: {exc}") from exc


def load_zoo_dir(path):
    """Models in ``path`` in the order recorded by ``train`` (zoo.json)."""
    d = Path(path)
    index = d / "zoo.json"
    try:
        if index.exists():
            ids = [m["model_id"] for m in json.loads(index.read_text())["models"]]
        else:
            ids = sorted(p.stem for p in d.glob("*.model"))
        if not ids:
            raise RuntimeError(f"no model files in {d}")
        return [load_model(d / f"{i}.model") for i in ids]
    except (OSError, ValueError, KeyError) as exc:
        raise RuntimeError(f"cannot read models from {d}: {exc}") from exc


def write_adversarial(path, indices, labels, x_adv):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", *(f"x{j}" for j in range(x_adv.shape[1]))])
        for i, y, row in zip(indices, labels, x_adv):
            w.writerow([int(i), int(y), *(fmt(v) for v in row)])


def read_adversarial(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    idx = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    x = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    return idx, labels, x


def _check_dims(models, d):
    for m in models:
        if m.input_dim != d:
            raise RuntimeError(f"shape mismatch: examples have d={d} but model {m.model_id} expects d={m.input_dim}")


def _print_matrix(title, row_ids, col_ids, m):
    print(title)
    print("surrogate\\target " + " ".join(f"{c:>8}" for c in col_ids))
    for rid, row in zip(row_ids, m):
        print(f"{rid:<16} " + " ".join(f"{v:8.3f}" for v in row))


# ----------------------------------------------------------------------------
# commands


def cmd_dataset_gen(args):
    cfg = _resolve(args)
    ds = make_synthetic_dataset(cfg.dataset_spec())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    print(f"d={ds.d} C={ds.n_classes} n={len(ds.labels)} train={len(ds.train_idx)} test={len(ds.test_idx)} seed={cfg.seed}")
    print("per-class counts: " + " ".join(str(c) for c in counts))
    print(f"wrote {out}")


def cmd_train(args):
    cfg = _resolve(args)
    ds = load_dataset(args.dataset)
    zoo = build_zoo(ds, cfg.zoo, cfg.train_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    print(f"{'model':<8} {'train_acc':>9} {'test_acc':>9}")
    for member in zoo:
        m = member.model
        save_model(m, out / f"{m.model_id}.model")
        entries.append({
            "model_id": m.model_id,
            "layer_sizes": m.layer_sizes,
            "activation": m.activation,
            "train_accuracy": member.train_accuracy,
            "test_accuracy": member.test_accuracy,
            "sha256": model_hash(m),
        })
        print(f"{m.model_id:<8} {member.train_accuracy:9.3f} {member.test_accuracy:9.3f}")
    write_json(out / "zoo.json", {"schema_version": 1, "seed": cfg.seed, "dataset_sha256": sha256_file(args.dataset),
                                  "train": cfg.to_dict()["train"], "models": entries})
    print(f"wrote {len(entries)} model files to {out}")


def cmd_attack(args):
    cfg = _resolve(args)
    ds = load_dataset(args.dataset)
    models = load_zoo_dir(args.models)
    by_id = {m.model_id: m for m in models}
    if args.surrogate not in by_id:
        raise UsageError(f"unknown surrogate {args.surrogate!r}; available ids: {', '.join(by_id)}")
    model = by_id[args.surrogate]
    _check_dims([model], ds.d)
    attack_cfg = cfg.attack_config()
    algo = cfg.algo()
    x_adv, trace = attack_examples(algo, model, ds.test_x, ds.test_y, attack_cfg, indices=ds.test_idx,
                                   threads=args.threads, chunk_size=cfg.chunk_size())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_adversarial(out / "adversarial.csv", ds.test_idx, ds.test_y, x_adv)
    write_traces(trace, out / "traces", ds.test_idx)
    write_json(out / "manifest.json", {
        "schema_version": 1,
        "algo": algo,
        "surrogate": model.model_id,
        "model_sha256": model_hash(model),
        "dataset_sha256": sha256_file(args.dataset),
        "seed": cfg.seed,
        "rng_version": RNG_VERSION,
        "attack": attack_cfg.to_dict(),
        "config": cfg.to_dict(),
    })
    fooled = float(np.mean(model.predict(x_adv) != ds.test_y))
    print(f"{algo} from {model.model_id}: {len(x_adv)} examples, white-box ASR {fooled:.3f}; wrote {out}")


def cmd_eval(args):
    ds = load_dataset(args.dataset)
    models = load_zoo_dir(args.models)
    runs = {}
    for run in args.runs:
        run = Path(run)
        try:
            manifest = json.loads((run / "manifest.json").read_text())
            idx, labels, x_adv = read_adversarial(run / "adversarial.csv")
        except (OSError, ValueError, KeyError) as exc:
            raise RuntimeError(f"cannot read attack run {run}: {exc}") from exc
        _check_dims(models, x_adv.shape[1])
        runs.setdefault(manifest["algo"], []).append((manifest, idx, labels, x_adv))
    out = Path(args.out)
    summary = []
    for algo, items in runs.items():
        sids = [m["surrogate"] for m, *_ in items]
        if len(set(sids)) != len(sids):
            raise UsageError(f"duplicate surrogate among {algo} runs")
        _, idx, labels, _ = items[0]
        if any(not np.array_equal(i, idx) for _, i, _, _ in items):
            raise UsageError(f"{algo} runs cover different example sets")
        clean = ds.inputs[idx]
        adversarial = {m["surrogate"]: x for m, _, _, x in items}
        asr, asr_f, adv_loss = transfer_matrices(sids, models, adversarial, labels, clean)
        ra, rows = rank_agreement(asr, adv_loss)
        tids = [m.model_id for m in models]
        report = TransferReport(sids, tids, asr, asr_f, adv_loss, ra, rows, algo,
                                {"runs": {m["surrogate"]: m["attack"] for m, *_ in items}},
                                {m["surrogate"]: m["seed"] for m, *_ in items},
                                {m.model_id: model_hash(m) for m in models})
        emit_report(report, out / algo, with_traces=False)
        _print_matrix(f"[{algo}] ASR", sids, tids, asr)
        print(f"[{algo}] rank_agreement={'degenerate' if report.rank_agreement_degenerate else f'{ra:.3f}'}")
        summary.append(_summary_row(report))
    if len(summary) > 1:
        _write_comparison(out / "comparison.csv", summary)
    print(f"wrote report to {out}")


def _summary_row(report: TransferReport):
    diag = report.diagonal()
    return {
        "algo": report.algo,
        "mean_diag_asr": float(diag.mean()) if diag.size else float("nan"),
        "mean_offdiag_asr": report.off_diagonal_mean(),
        "mean_offdiag_asr_filtered": report.off_diagonal_mean(report.asr_filtered),
        "rank_agreement": report.rank_agreement,
    }


def _write_comparison(path, summary):
    keys = list(summary[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in summary:
            w.writerow([row["algo"], *(fmt(row[k]) for k in keys[1:])])
    print(f"{'algo':<6} {'diag':>7} {'offdiag':>8}")
    for row in summary:
        print(f"{row['algo']:<6} {row['mean_diag_asr']:7.3f} {row['mean_offdiag_asr']:8.3f}")


def _analysis_point(args, ds):
    if not 0 <= args.index < len(ds.test_idx):
        raise UsageError(f"--index must lie in [0, {len(ds.test_idx)})")
    if args.adv:
        idx, labels, x_adv = read_adversarial(Path(args.adv) / "adversarial.csv")
        return x_adv[args.index], int(labels[args.index]), int(idx[args.index])
    return ds.test_x[args.index], int(ds.test_y[args.index]), int(ds.test_idx[args.index])


def cmd_analyze(args):
    cfg = _resolve(args)
    ds = load_dataset(args.dataset)
    try:
        model = load_model(args.model)
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"cannot read model {args.model}: {exc}") from exc
    _check_dims([model], ds.d)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    attack_cfg = cfg.attack_config()

    if args.kind == "diversity":
        n = min(args.n_examples, len(ds.test_idx))
        curves = diversity_comparison(model, ds.test_x[:n], ds.test_y[:n], attack_cfg,
                                      indices=ds.test_idx[:n], threads=args.threads)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *(c.strategy for c in curves)])
            for t in range(attack_cfg.T):
                w.writerow([t, *(fmt(c.values[t]) for c in curves)])
        wins = int(np.sum(curves[1].values >= curves[0].values))
        print(f"mcas >= uniform in {wins} of {attack_cfg.T} iterations; wrote {out}")
        return

    x, y, row = _analysis_point(args, ds)
    if args.kind == "surface":
        grid = loss_surface_grid(model, x, y, SeededRng(cfg.seed, (7, row)), args.range_, args.resolution)
        grid.to_csv(out)
        grid.to_json(out.with_suffix(".json"))
        print(f"{args.resolution}x{args.resolution} surface, center loss {grid.center_loss:.6g}; wrote {out}")
    elif args.kind == "flatness":
        xi = attack_cfg.xi if args.xi is None else args.xi
        est = estimate_flatness(model, x, y, xi, args.N, args.beta_f, seed=cfg.seed, stream_id=(8, row))
        write_json(out, asdict(est) | {"example_index": row, "label": y})
        print(f"psi0={est.psi0:.6g} psi1={est.psi1:.6g} psi_af={est.psi_af:.6g}; wrote {out}")
    elif args.kind == "vicinity":
        if ds.d > 3:
            raise UsageError(f"vicinity check refused: brute force needs d <= 3, dataset has d={ds.d}")
        xi = attack_cfg.xi if args.xi is None else args.xi
        rep = check_vicinity_bound(model, x, y, xi, n_grid=args.n_grid, beta_f=args.beta_f)
        write_json(out, asdict(rep) | {"example_index": row, "xi": xi})
        print(f"violations={rep.violations} total={rep.total} max_excess={rep.max_excess:.3g}")


def cmd_report(args):
    cfg = _resolve(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.dataset_spec()
    ds = make_synthetic_dataset(spec)
    ds.save(out / "dataset.json")
    zoo = build_zoo(ds, cfg.zoo, cfg.train_config())
    models = [m.model for m in zoo]
    (out / "models").mkdir(exist_ok=True)
    for m in models:
        save_model(m, out / "models" / f"{m.model_id}.model")
    effective = cfg.to_dict()
    (out / "config.yaml").write_text(yaml.safe_dump(effective, sort_keys=False))
    summary = []
    for algo in cfg.algos():
        exp = ExperimentConfig(spec, tuple(cfg.zoo), cfg.train_config(), cfg.attack_config(), algo,
                               threads=args.threads, chunk_size=cfg.chunk_size())
        report = run_transfer_experiment(exp, ds, models)
        extra = {"master_seed": cfg.seed, "effective_config": effective,
                 "test_accuracy": {m.model.model_id: m.test_accuracy for m in zoo}}
        emit_report(report, out / algo, extra_manifest=extra)
        _print_matrix(f"[{algo}] ASR", report.surrogate_ids, report.target_ids, report.asr)
        summary.append(_summary_row(report))
    _write_comparison(out / "comparison.csv", summary)
    print(f"wrote report to {out}")


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
