"""Transfer experiments on synthetic Gaussian-blob data.

The pipeline is: dataset -> model zoo -> attack the test split from every
surrogate -> evaluate every target -> :class:`TransferReport`. All randomness
is keyed by explicit seeds (see ``SeededRng``); attacks are split into
fixed-size chunks so the thread count never changes any number.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackConfig, BatchTrace, run_attack, write_traces
from .models import MlpClassifier, TrainConfig, accuracy, model_to_bytes, train
from .numerics import RNG_VERSION, SeededRng

DATASET_FORMAT = "advflat-dataset"
DATASET_FORMAT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
DEFAULT_CHUNK = 64


def fmt(v) -> str:
    return f"{float(v):.17g}"


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    """Gaussian blobs, one per class, with centres drawn in ``[center_lo, center_hi]^d``.

    Centres are rejection-sampled so no two are closer than ``min_center_gap``
    (default ``4 * cluster_spread``, but never below a tenth of the centre
    box width so that very tight blobs still get distinct centres).
    """

    d: int = 2
    C: int = 8
    n_per_class: int = 200
    cluster_spread: float = 0.05
    seed: int = 0
    center_lo: float = 0.2
    center_hi: float = 0.8
    min_center_gap: float | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.min_center_gap is None:
            self.min_center_gap = max(4.0 * self.cluster_spread, 0.1 * (self.center_hi - self.center_lo))
        if self.d < 2 or self.C < 2 or self.n_per_class < 1:
            raise ValueError("dataset spec needs d >= 2, C >= 2, n_per_class >= 1")
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be > 0")
        if not 0.0 <= self.center_lo < self.center_hi <= 1.0:
            raise ValueError("need 0 <= center_lo < center_hi <= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    centers: np.ndarray | None = None
    spec: DatasetSpec | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("label count must equal row count")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ValueError("labels must lie in [0, C)")
        if np.any(self.inputs < 0) or np.any(self.inputs > 1):
            raise ValueError("features must lie in [0, 1]")

    @property
    def d(self):
        return self.inputs.shape[1]

    @property
    def train_x(self):
        return self.inputs[self.train_idx]

    @property
    def train_y(self):
        return self.labels[self.train_idx]

    @property
    def test_x(self):
        return self.inputs[self.test_idx]

    @property
    def test_y(self):
        return self.labels[self.test_idx]

    def to_json(self) -> str:
        payload = {
            "format": DATASET_FORMAT,
            "version": DATASET_FORMAT_VERSION,
            "spec": asdict(self.spec) if self.spec else None,
            "n_classes": self.n_classes,
            "d": self.d,
            "centers": None if self.centers is None else self.centers.tolist(),
            "inputs": self.inputs.tolist(),
            "labels": self.labels.tolist(),
            "train_idx": self.train_idx.tolist(),
            "test_idx": self.test_idx.tolist(),
        }
        return json.dumps(payload) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Dataset:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"dataset file is not valid JSON: {exc}") from exc
        if payload.get("format") != DATASET_FORMAT:
            raise ValueError("not a dataset file (format tag missing)")
        if payload.get("version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {payload.get('version')}")
        spec = DatasetSpec(**payload["spec"]) if payload.get("spec") else None
        centers = payload.get("centers")
        return cls(
            np.array(payload["inputs"], dtype=np.float64).reshape(-1, payload["d"]),
            np.array(payload["labels"], dtype=np.int64),
            payload["n_classes"],
            np.array(payload["train_idx"], dtype=np.int64),
            np.array(payload["test_idx"], dtype=np.int64),
            None if centers is None else np.array(centers),
            spec,
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> Dataset:
        return cls.from_json(Path(path).read_text())


def make_synthetic_dataset(spec: DatasetSpec, rng: SeededRng | None = None) -> Dataset:
    rng = rng or SeededRng(spec.seed, 0)
    centers = []
    for _ in range(100_000):
        c = rng.uniform(spec.center_lo, spec.center_hi, spec.d)
        if all(np.linalg.norm(c - o) >= spec.min_center_gap for o in centers):
            centers.append(c)
            if len(centers) == spec.C:
                break
    else:
        raise ValueError(
            f"could not place {spec.C} centres {spec.min_center_gap} apart in [{spec.center_lo}, {spec.center_hi}]^{spec.d}"
        )
    centers = np.array(centers)
    noise = rng.normal((spec.C, spec.n_per_class, spec.d))
    inputs = np.clip(centers[:, None, :] + spec.cluster_spread * noise, 0.0, 1.0).reshape(-1, spec.d)
    labels = np.repeat(np.arange(spec.C), spec.n_per_class)
    order = rng.permutation(len(labels))
    n_test = int(round(spec.test_fraction * len(labels)))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return Dataset(inputs, labels, spec.C, train_idx, test_idx, centers, spec)


# ----------------------------------------------------------------------------
# model zoo


@dataclass
class ModelSpec:
    model_id: str
    hidden: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


DEFAULT_ZOO = (
    ModelSpec("m0", (64,), "tanh"),
    ModelSpec("m1", (32, 32), "softplus"),
    ModelSpec("m2", (128,), "relu"),
    ModelSpec("m3", (), "tanh"),
)


@dataclass
class ZooMember:
    model: MlpClassifier
    train_accuracy: float
    test_accuracy: float


def build_zoo(dataset: Dataset, specs=DEFAULT_ZOO, train_cfg: TrainConfig | None = None) -> list[ZooMember]:
    """Initialise and train every model; streams are keyed by position in ``specs``."""
    train_cfg = train_cfg or TrainConfig()
    zoo = []
    for j, spec in enumerate(specs):
        sizes = [dataset.d, *spec.hidden, dataset.n_classes]
        init = MlpClassifier.initialize(sizes, spec.activation, SeededRng(train_cfg.init_seed, (1, j)), spec.model_id)
        res = train(init, dataset.train_x, dataset.train_y, train_cfg, SeededRng(train_cfg.init_seed, (2, j)))
        zoo.append(ZooMember(res.model, res.train_accuracy, accuracy(res.model, dataset.test_x, dataset.test_y)))
    return zoo


def model_hash(model) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


# ----------------------------------------------------------------------------
# attacks and metrics


def attack_examples(algo, model, x, y, cfg: AttackConfig, indices=None, threads=1, chunk_size=DEFAULT_CHUNK):
    """Attack every row of ``x``; row ``k`` uses random stream ``indices[k]``.

    Work is split into chunks of ``chunk_size`` rows regardless of ``threads``,
    so outputs are bit-identical for any thread count.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    bounds = [(s, min(s + chunk_size, len(x))) for s in range(0, len(x), chunk_size)]

    def work(bound):
        s, e = bound
        return run_attack(algo, model, x[s:e], y[s:e], cfg, stream_ids=indices[s:e])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    return np.concatenate([p[0] for p in parts]), BatchTrace.concat([p[1] for p in parts])


def evaluate_asr(model, x_adv, labels, filter_correct=False, x_clean=None) -> float:
    """Fraction of adversarial examples the model misclassifies.

    With ``filter_correct`` the denominator only counts examples whose clean
    version (``x_clean``) the model classified correctly.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty example set")
    fooled = model.predict(x_adv) != labels
    if filter_correct:
        if x_clean is None:
            raise ValueError("filter_correct needs the clean inputs")
        keep = model.predict(x_clean) == labels
        if not np.any(keep):
            raise ValueError("no example is classified correctly before the attack; filtered rate undefined")
        fooled = fooled[keep]
    return float(np.mean(fooled))


def _pearson_exact(ra, rb) -> float:
    """Pearson correlation of two rank vectors in exact rational arithmetic.

    Average ranks are half-integers, so every intermediate is rational and the
    only rounding happens in the final square root.
    """
    ra = [Fraction(r) for r in ra]
    rb = [Fraction(r) for r in rb]
    k = len(ra)
    ma, mb = sum(ra) / k, sum(rb) / k
    cov = sum((p - ma) * (q - mb) for p, q in zip(ra, rb))
    va = sum((p - ma) ** 2 for p in ra)
    vb = sum((q - mb) ** 2 for q in rb)
    if va == 0 or vb == 0:
        return math.nan
    return math.copysign(math.sqrt(cov * cov / (va * vb)), cov)


def spearman(a, b) -> float:
    """Spearman correlation with average ranks for ties; NaN when either side is constant."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2:
        return math.nan
    return _pearson_exact(rankdata(a), rankdata(b))


def rank_agreement(asr, adv_loss):
    """Per-surrogate Spearman between target ASR and target loss (``-L_adv``).

    Returns ``(mean over non-degenerate rows, per-row values)``. Positive means
    lower adversarial loss goes with higher ASR.
    """
    rows = [spearman(a, -np.asarray(l)) for a, l in zip(asr, adv_loss)]
    valid = [r for r in rows if not math.isnan(r)]
    return (float(np.mean(valid)) if valid else math.nan), rows


# ----------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    zoo: tuple = DEFAULT_ZOO
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    algo: str = "afa"
    threads: int = 1
    chunk_size: int = DEFAULT_CHUNK

    def to_dict(self):
        return {
            "dataset": asdict(self.dataset),
            "zoo": [asdict(m) | {"hidden": list(m.hidden)} for m in self.zoo],
            "train": asdict(self.train),
            "attack": self.attack.to_dict(),
            "algo": self.algo,
            "chunk_size": self.chunk_size,
        }


@dataclass
class TransferReport:
    surrogate_ids: list
    target_ids: list
    asr: np.ndarray
    asr_filtered: np.ndarray
    adv_loss: np.ndarray
    rank_agreement: float
    rank_agreement_rows: list
    algo: str
    cfg: dict
    seeds: dict
    model_hashes: dict
    adversarial: dict = field(default_factory=dict, repr=False)
    traces: dict = field(default_factory=dict, repr=False)
    example_indices: np.ndarray | None = field(default=None, repr=False)

    @property
    def rank_agreement_degenerate(self):
        return math.isnan(self.rank_agreement)

    def off_diagonal_mean(self, matrix=None):
        m = self.asr if matrix is None else matrix
        mask = np.array([[s != t for t in self.target_ids] for s in self.surrogate_ids])
        return float(m[mask].mean()) if mask.any() else math.nan

    def diagonal(self, matrix=None):
        m = self.asr if matrix is None else matrix
        return np.array([m[i, self.target_ids.index(s)] for i, s in enumerate(self.surrogate_ids) if s in self.target_ids])


def transfer_matrices(surrogate_ids, targets, adversarial, labels, clean):
    """ASR (unfiltered and filtered) and mean adversarial loss for each surrogate/target pair."""
    S, K = len(surrogate_ids), len(targets)
    asr, asr_f, adv_loss = np.zeros((S, K)), np.zeros((S, K)), np.zeros((S, K))
    for i, sid in enumerate(surrogate_ids):
        x_adv = adversarial[sid]
        for j, target in enumerate(targets):
            asr[i, j] = evaluate_asr(target, x_adv, labels)
            try:
                asr_f[i, j] = evaluate_asr(target, x_adv, labels, filter_correct=True, x_clean=clean)
            except ValueError:
                asr_f[i, j] = math.nan
            adv_loss[i, j] = -float(np.mean(target.loss(x_adv, labels)))
    return asr, asr_f, adv_loss


def run_transfer_experiment(exp: ExperimentConfig, dataset: Dataset | None = None, models=None) -> TransferReport:
    """Attack the test split from each zoo member and score every member as a target."""
    dataset = dataset or make_synthetic_dataset(exp.dataset)
    if models is None:
        models = [m.model for m in build_zoo(dataset, exp.zoo, exp.train)]
    if len(models) < 3:
        raise ValueError("transfer experiments need a zoo of at least 3 models")
    untrained = [m.model_id for m in models if m.epochs_trained == 0]
    if untrained:
        raise ValueError(f"untrained model(s) in zoo: {', '.join(untrained)}")
    x, y, idx = dataset.test_x, dataset.test_y, dataset.test_idx
    adversarial, traces = {}, {}
    for m in models:
        adversarial[m.model_id], traces[m.model_id] = attack_examples(
            exp.algo, m, x, y, exp.attack, indices=idx, threads=exp.threads, chunk_size=exp.chunk_size
        )
    ids = [m.model_id for m in models]
    asr, asr_f, adv_loss = transfer_matrices(ids, models, adversarial, y, x)
    ra, rows = rank_agreement(asr, adv_loss)
    seeds = {
        "dataset": dataset.spec.seed if dataset.spec else None,
        "train_init": exp.train.init_seed,
        "attack": exp.attack.seed,
        "rng_version": RNG_VERSION,
    }
    return TransferReport(
        ids, ids, asr, asr_f, adv_loss, ra, rows, exp.algo, exp.to_dict(), seeds,
        {m.model_id: model_hash(m) for m in models}, adversarial, traces, idx,
    )


@dataclass
class DiversityCurve:
    strategy: str
    values: np.ndarray


def diversity_comparison(model, x, y, cfg: AttackConfig, strategies=("uniform", "mcas"), indices=None, threads=1):
    """Mean (over examples) std of the N inner-sample losses at every outer step."""
    if cfg.N < 2:
        raise ValueError("diversity needs N >= 2 inner samples")
    curves = []
    for strategy in strategies:
        if strategy not in ("uniform", "mcas"):
            raise ValueError(f"unknown sampling strategy {strategy!r}")
        run_cfg = replace(cfg, mcas_enabled=(strategy == "mcas"))
        _, trace = attack_examples("afa", model, x, y, run_cfg, indices=indices, threads=threads)
        curves.append(DiversityCurve(strategy, trace.sample_losses.std(axis=-1).mean(axis=0)))
    return curves


# ----------------------------------------------------------------------------
# report files


def write_matrix_csv(path, row_ids, col_ids, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surrogate\\target", *col_ids])
        for rid, row in zip(row_ids, matrix):
            w.writerow([rid, *(fmt(v) for v in row)])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    return ids, cols, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _json_safe(obj):
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def report_manifest(report: TransferReport, extra=None) -> dict:
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "algo": report.algo,
        "config": report.cfg,
        "seeds": report.seeds,
        "surrogates": report.surrogate_ids,
        "targets": report.target_ids,
        "model_hashes": report.model_hashes,
        "rank_agreement": report.rank_agreement,
        "rank_agreement_rows": report.rank_agreement_rows,
        "rank_agreement_degenerate": report.rank_agreement_degenerate,
        "mean_offdiag_asr": report.off_diagonal_mean(),
    }
    if extra:
        manifest.update(extra)
    return _json_safe(manifest)


def write_json(path, payload):
    Path(path).write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=False) + "\n")


def emit_report(report: TransferReport, out_dir, extra_manifest=None, with_traces=True) -> list:
    """Write asr.csv, asr_filtered.csv, adv_loss.csv, manifest.json and per-example traces."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, matrix in (("asr", report.asr), ("asr_filtered", report.asr_filtered), ("adv_loss", report.adv_loss)):
            path = out / f"{name}.csv"
            write_matrix_csv(path, report.surrogate_ids, report.target_ids, matrix)
            written.append(path)
        path = out / "manifest.json"
        write_json(path, report_manifest(report, extra_manifest))
        written.append(path)
        if with_traces:
            for sid, trace in report.traces.items():
                write_traces(trace, out / "traces" / sid, report.example_indices)
                written.append(out / "traces" / sid)
    except OSError as exc:
        raise OSError(f"failed writing report to {out}: {exc}") from exc
    return written
