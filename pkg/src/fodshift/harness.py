"""Experiment orchestration: intra-site baseline, age split and inter-site transfer.

Every run is driven by an :class:`ExperimentSpec`. One master seed fans out
through labelled hashing to cohorts, splits, initialisations and shuffles,
so a spec reproduces its outputs byte for byte. Subject provenance of every
training, validation, reference and test set is recorded and audited for
leakage before anything is written.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .csd import gold_standard_split
from .estimator import (EstimatorModel, TrainConfig, fine_tune, predict_volume, train,
                        training_data)
from .geometry import make_tessellation
from .harmonize import harmonize_subjects
from .io import atomic_write, dump_json, write_model
from .metrics import (ArctanFitError, MetricsReport, evaluate, fit_arctan, mean_wm_fa,
                      reports_to_csv, reports_to_markdown, wm_mask)
from .phantom import build_cohort, derive_seed, get_preset

__all__ = [
    "ExperimentSpec",
    "RunRecord",
    "LeakageError",
    "split_counts",
    "split_subjects",
    "run_intra_baseline",
    "run_age_split",
    "run_inter_site",
    "run_experiment",
    "audit_leakage",
    "render_report",
    "write_outputs",
]

KINDS = ("intra_baseline", "age_split", "inter_site")
INTER_METHODS = ("control_cross", "control_self", "mom", "finetune", "scratch_ablation")


class LeakageError(RuntimeError):
    """A test subject appears in a training, validation or reference set."""


@dataclass
class ExperimentSpec:
    kind: str = "intra_baseline"
    site: str = "dhcp"
    source: str = "bcp"
    target: str = "dhcp"
    n_subjects: int = 20
    grid_dims: list = field(default_factory=lambda: [12, 12, 12])
    split: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    n_target: list = field(default_factory=lambda: [1, 2, 5, 10])
    methods: list = field(default_factory=lambda: list(INTER_METHODS))
    seed: int = 0
    epochs: int = 200
    finetune_epochs: int = 100
    paper_hparams: bool = False
    hidden: list = field(default_factory=lambda: [256, 256])
    dropout: float = 0.1
    gs_tess_level: int = 3
    age_ranges: dict = field(default_factory=dict)
    age_finetune: bool = True
    age_finetune_subjects: int = 5
    finetune_seeds: list = field(default_factory=lambda: [0, 1, 2])
    mom_sigma: float = 1.0
    layout_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split fractions must be three nonnegative numbers summing to 1")
        if min(split_counts(self.n_subjects, self.split)) < 1:
            raise ValueError(f"{self.n_subjects} subjects leave an empty split under "
                             f"fractions {self.split}")
        bad = set(self.methods) - set(INTER_METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        self.grid_dims = [int(d) for d in self.grid_dims]
        self.n_target = sorted(int(n) for n in self.n_target)
        if any(n < 1 for n in self.n_target):
            raise ValueError("n_target entries must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known - {"out"}
        if extra:
            raise ValueError(f"unknown spec fields {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def train_config(self, label) -> TrainConfig:
        base = "paper" if self.paper_hparams else "desk"
        over = {} if self.paper_hparams else {"epochs": self.epochs}
        return TrainConfig.preset(base, seed=derive_seed(self.seed, "shuffle", label), **over)

    def finetune_config(self, label) -> TrainConfig:
        over = {} if self.paper_hparams else {"epochs": self.finetune_epochs}
        return TrainConfig.preset("finetune", seed=derive_seed(self.seed, "shuffle", label), **over)

    def new_model(self, label) -> EstimatorModel:
        from .geometry import n_coeffs
        dims = [6 * 27, *self.hidden, n_coeffs(8)]
        return EstimatorModel(dims, self.dropout, derive_seed(self.seed, "init", label) % (2 ** 31),
                              dtype=np.float32)


@dataclass
class RunRecord:
    spec_hash: str
    kind: str
    reports: list
    config: dict
    provenance: list = field(default_factory=list)   # {"role", "context", "ids"}
    extras: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)        # name -> EstimatorModel, not serialised

    def to_dict(self) -> dict:
        return {
            "spec_hash": self.spec_hash,
            "kind": self.kind,
            "config": self.config,
            "reports": [{"site": r.site, "experiment": r.experiment, "method": r.method,
                         "n_target_subjects": r.n_target_subjects,
                         "classes": {str(k): v for k, v in r.classes.items()}}
                        for r in self.reports],
            "provenance": self.provenance,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        reps = [MetricsReport(r["site"], r["experiment"], r["method"], r["n_target_subjects"],
                              {int(k): _nan_fill(v) for k, v in r["classes"].items()}) for r in d["reports"]]
        return cls(d["spec_hash"], d["kind"], reps, d["config"], d.get("provenance", []),
                   d.get("extras", {}))

    def find(self, method: str, experiment: str | None = None, n: int | None = None):
        for r in self.reports:
            if r.method == method and (experiment is None or r.experiment == experiment) \
                    and (n is None or r.n_target_subjects == n):
                return r
        raise KeyError((method, experiment, n))


# --- splits -------------------------------------------------------------

def _nan_fill(d: dict) -> dict:
    return {k: float("nan") if v is None else v for k, v in d.items()}


def split_counts(n: int, fractions=(0.7, 0.15, 0.15)):
    """Validation and test sizes are floored; the remainder goes to training."""
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_subjects(subjects, fractions, seed):
    n_tr, n_va, _ = split_counts(len(subjects), fractions)
    order = np.random.default_rng(seed).permutation(len(subjects))
    pick = [subjects[i] for i in order]
    return pick[:n_tr], pick[n_tr:n_tr + n_va], pick[n_tr + n_va:]


class _Cohort:
    """A split cohort with cached masks."""

    def __init__(self, spec: ExperimentSpec, preset: str, label: str, age_range=None):
        self.preset = get_preset(preset)
        subjects = build_cohort(self.preset, spec.n_subjects, age_range=age_range,
                                grid_dims=tuple(spec.grid_dims), rng_seed=spec.seed,
                                cohort_label=label, layout_seed=spec.layout_seed)
        self.subjects = subjects
        self.masks = {s.id: wm_mask(s, self.preset) for s in subjects}
        self.train, self.val, self.test = split_subjects(
            subjects, spec.split, derive_seed(spec.seed, "split", self.preset.name, label))

    def data(self, subjects):
        return training_data(subjects, [self.masks[s.id] for s in subjects], dtype=np.float32)

    def mask_list(self, subjects):
        return [self.masks[s.id] for s in subjects]


def _evaluate_model(model, subjects, cohort: _Cohort, **kw) -> MetricsReport:
    masks = cohort.mask_list(subjects)
    preds = [predict_volume(model, s, mask=m) for s, m in zip(subjects, masks)]
    return evaluate(preds, [s.gt_fod for s in subjects], masks, **kw)


def _prov(role, context, ids):
    return {"role": role, "context": context, "ids": sorted(ids)}


def _train_prov(context, history):
    return [_prov("train", context, history["train_subjects"]),
            _prov("val", context, history["val_subjects"])]


# --- experiments --------------------------------------------------------

def run_intra_baseline(spec: ExperimentSpec) -> RunRecord:
    """Train on one cohort; compare DL-vs-GT with split-half GS consistency."""
    t0 = time.perf_counter()
    c = _Cohort(spec, spec.site, "baseline")
    timing = {"cohort": time.perf_counter() - t0}
    site = c.preset.protocol.site_label

    t0 = time.perf_counter()
    model, hist = train(spec.new_model("intra"), c.data(c.train), c.data(c.val),
                        spec.train_config("intra"))
    timing["train"] = time.perf_counter() - t0
    dl = _evaluate_model(model, c.test, c, site=site, experiment="intra", method="DL")

    t0 = time.perf_counter()
    tess = make_tessellation(spec.gs_tess_level)
    fa, fb, masks = [], [], []
    for s in c.test:
        a, b = gold_standard_split(s, derive_seed(spec.seed, "gs", s.id) % (2 ** 31),
                                   tess=tess, mask=c.masks[s.id])
        fa.append(a)
        fb.append(b)
        masks.append(c.masks[s.id])
    gs = evaluate(fa, fb, masks, site=site, experiment="intra", method="GS")
    timing["gs"] = time.perf_counter() - t0

    prov = _train_prov("DL", hist) + [_prov("test", "DL", [s.id for s in c.test]),
                                      _prov("test", "GS", [s.id for s in c.test])]
    extras = {"history": _history_summary(hist),
              "split_sizes": [len(c.train), len(c.val), len(c.test)]}
    return RunRecord(spec.hash(), spec.kind, [gs, dl], spec.to_dict(), prov, extras, timing,
                     {"DL": model})


def _history_summary(h) -> dict:
    return {"best_epoch": h["best_epoch"], "best_val": h["best_val"],
            "initial_val": h["initial_val"], "val_loss": h["val_loss"],
            "train_loss": h["train_loss"]}


def run_age_split(spec: ExperimentSpec) -> RunRecord:
    """Young/old cohorts of one site: 2x2 train/test matrix, cross-age fine-tuning, FA curve."""
    preset = get_preset(spec.site)
    site = preset.protocol.site_label
    timing = {}
    t0 = time.perf_counter()
    cohorts = {}
    for g in ("young", "old"):
        rng = spec.age_ranges.get(g, preset.age_ranges[g])
        cohorts[g] = _Cohort(spec, spec.site, g, tuple(rng))
    timing["cohort"] = time.perf_counter() - t0

    models, prov, reports = {}, [], []
    t0 = time.perf_counter()
    for g, c in cohorts.items():
        models[g], hist = train(spec.new_model(f"age-{g}"), c.data(c.train), c.data(c.val),
                                spec.train_config(f"age-{g}"))
        prov += _train_prov(f"DL_{g[0]}", hist)
    timing["train"] = time.perf_counter() - t0

    for tr in ("young", "old"):
        for te in ("young", "old"):
            c = cohorts[te]
            exp = f"{tr[0]}->{te[0]}"
            reports.append(_evaluate_model(models[tr], c.test, c, site=site, experiment=exp,
                                           method="DL"))
            prov.append(_prov("test", f"DL {exp}", [s.id for s in c.test]))

    extras: dict = {}
    if spec.age_finetune:
        t0 = time.perf_counter()
        per_seed: dict = {}
        for tr, te in (("old", "young"), ("young", "old")):
            c = cohorts[te]
            exp = f"{tr[0]}->{te[0]}"
            runs = []
            for fs in spec.finetune_seeds:
                pick = np.random.default_rng(derive_seed(spec.seed, "age-ft-pick", exp, fs))
                k = min(spec.age_finetune_subjects, len(c.train))
                chosen = [c.train[i] for i in sorted(pick.choice(len(c.train), k, replace=False))]
                cfg = spec.finetune_config(f"age-ft-{exp}-{fs}")
                ft, hist = fine_tune(models[tr], c.data(chosen), cfg)
                prov += [_prov("finetune", f"FT {exp} seed {fs}", hist["train_subjects"])]
                runs.append(_evaluate_model(ft, c.test, c, site=site, experiment=exp,
                                            method="finetune", n_target_subjects=k))
            per_seed[exp] = [r.classes for r in runs]
            reports.append(_mean_report(runs))
        extras["finetune_per_seed"] = _jsonable(per_seed)
        timing["finetune"] = time.perf_counter() - t0

    # FA-age curve over both cohorts, in postnatal months
    ages, fas = [], []
    for c in cohorts.values():
        for s in c.subjects:
            ages.append(float(preset.to_postnatal_months(s.age)))
            fas.append(mean_wm_fa(s))
    extras["fa_curve"] = _fit_curve(np.array(ages), np.array(fas))
    ars = {r.experiment: r.classes[1]["AR"] for r in reports if r.method == "DL"}
    extras["ar_drop_1f"] = 0.5 * ((ars["y->y"] - ars["o->y"]) + (ars["o->o"] - ars["y->o"]))
    return RunRecord(spec.hash(), spec.kind, reports, spec.to_dict(), prov, extras, timing,
                     {f"DL_{g[0]}": m for g, m in models.items()})


def _fit_curve(t, y) -> dict:
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    try:
        fit, converged = fit_arctan(t, y), True
    except ArctanFitError as err:
        fit, converged = err.best, False
    mid = 0.5 * (t.min() + t.max())
    return {"a": fit.a, "b": fit.b, "c": fit.c, "t0": fit.t0, "rms": fit.rms,
            "converged": converged, "midpoint_months": mid,
            "slope_at_midpoint": float(fit.slope(mid)),
            "ages_months": t.tolist(), "mean_fa": y.tolist()}


def _mean_report(runs) -> MetricsReport:
    first = runs[0]
    classes = {}
    for k in first.classes:
        classes[k] = {key: _nanmean([r.classes[k][key] for r in runs])
                      for key in ("AR", "AE", "dAFD")}
        classes[k]["n_voxels"] = first.classes[k]["n_voxels"]
    return MetricsReport(first.site, first.experiment, first.method, first.n_target_subjects,
                         classes)


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def run_inter_site(spec: ExperimentSpec) -> RunRecord:
    """Source-trained model on a target site: bounds, MoM and fine-tuning sweeps."""
    timing = {}
    t0 = time.perf_counter()
    src = _Cohort(spec, spec.source, "baseline")
    tgt = _Cohort(spec, spec.target, "baseline")
    timing["cohort"] = time.perf_counter() - t0
    site = tgt.preset.protocol.site_label
    exp = f"{src.preset.name}->{tgt.preset.name}"
    kw = dict(site=site, experiment=exp, classes=(1,))
    if max(spec.n_target) > len(tgt.train):
        raise ValueError(f"n_target up to {max(spec.n_target)} needs that many target "
                         f"training subjects, cohort split has {len(tgt.train)}")
    test_ids = [s.id for s in tgt.test]
    reports, prov, models = [], [], {}

    t0 = time.perf_counter()
    source_model, hist = train(spec.new_model("source"), src.data(src.train), src.data(src.val),
                               spec.train_config("source"))
    timing["train_source"] = time.perf_counter() - t0
    models["source"] = source_model
    prov += _train_prov("source model", hist)
    methods = set(spec.methods)

    if "control_cross" in methods:
        reports.append(_evaluate_model(source_model, tgt.test, tgt, method="control_cross", **kw))
        prov.append(_prov("test", "control_cross", test_ids))
    if "control_self" in methods:
        t0 = time.perf_counter()
        self_model, h2 = train(spec.new_model("self"), tgt.data(tgt.train), tgt.data(tgt.val),
                               spec.train_config("self"))
        timing["train_self"] = time.perf_counter() - t0
        models["self"] = self_model
        prov += _train_prov("control_self", h2)
        reports.append(_evaluate_model(self_model, tgt.test, tgt, method="control_self", **kw))
        prov.append(_prov("test", "control_self", test_ids))

    for n in spec.n_target:
        refs = tgt.train[:n]
        if "mom" in methods:
            t0 = time.perf_counter()
            harmonised, _ = harmonize_subjects(tgt.test, refs, src.train, sigma_vox=spec.mom_sigma)
            reports.append(_evaluate_model(source_model, harmonised, tgt, method="mom",
                                           n_target_subjects=n, **kw))
            prov += [_prov("reference", f"mom n={n} target", [s.id for s in refs]),
                     _prov("reference", f"mom n={n} source", [s.id for s in src.train]),
                     _prov("test", f"mom n={n}", test_ids)]
            timing[f"mom_{n}"] = time.perf_counter() - t0
        if "finetune" in methods:
            t0 = time.perf_counter()
            ft, h = fine_tune(source_model, tgt.data(refs), spec.finetune_config(f"ft-{n}"))
            models[f"finetune_{n}"] = ft
            reports.append(_evaluate_model(ft, tgt.test, tgt, method="finetune",
                                           n_target_subjects=n, **kw))
            prov += [_prov("finetune", f"finetune n={n}", h["train_subjects"]),
                     _prov("test", f"finetune n={n}", test_ids)]
            timing[f"finetune_{n}"] = time.perf_counter() - t0

    if "scratch_ablation" in methods:
        t0 = time.perf_counter()
        n = max(spec.n_target)
        refs = tgt.train[:n]
        sc, h = fine_tune(spec.new_model("scratch"), tgt.data(refs), spec.finetune_config("scratch"))
        models["scratch"] = sc
        reports.append(_evaluate_model(sc, tgt.test, tgt, method="scratch_ablation",
                                       n_target_subjects=n, **kw))
        prov += [_prov("finetune", "scratch_ablation", h["train_subjects"]),
                 _prov("test", "scratch_ablation", test_ids)]
        timing["scratch"] = time.perf_counter() - t0

    extras = {"source_history": _history_summary(hist)}
    return RunRecord(spec.hash(), spec.kind, reports, spec.to_dict(), prov, extras, timing, models)


RUNNERS = {"intra_baseline": run_intra_baseline, "age_split": run_age_split,
           "inter_site": run_inter_site}


def run_experiment(spec: ExperimentSpec) -> RunRecord:
    record = RUNNERS[spec.kind](spec)
    audit_leakage(record)
    return record


def audit_leakage(record: RunRecord) -> None:
    """Raise :class:`LeakageError` if a test id shows up in any other role."""
    test_ids = {i for p in record.provenance if p["role"] == "test" for i in p["ids"]}
    for p in record.provenance:
        if p["role"] == "test":
            continue
        clash = test_ids.intersection(p["ids"])
        if clash:
            raise LeakageError(f"test subjects {sorted(clash)} used as {p['role']} "
                               f"in {p['context']}")


# --- reporting ----------------------------------------------------------

def render_report(records):
    """Markdown and CSV text for a list of records (header-only when empty)."""
    records = list(records)
    reports = [r for rec in records for r in rec.reports]
    csv_text = _csv(reports)
    parts = ["# FOD domain-shift experiments", ""]
    for rec in records:
        parts.append(reports_to_markdown(rec.reports, f"{rec.kind} ({rec.spec_hash})"))
        if "ar_drop_1f" in rec.extras:
            parts.append(f"Cross-age 1F AR drop: {rec.extras['ar_drop_1f']:.2f}\n")
        if "fa_curve" in rec.extras:
            fc = rec.extras["fa_curve"]
            parts.append(f"FA-age arctan fit: a={fc['a']:.4f} b={fc['b']:.4f} c={fc['c']:.4f} "
                         f"t0={fc['t0']:.4f}, slope at {fc['midpoint_months']:.2f} months "
                         f"= {fc['slope_at_midpoint']:.5f}/month\n")
    return "\n".join(parts), csv_text


def _csv(reports) -> str:
    return reports_to_csv(reports)


def write_outputs(record: RunRecord, out_dir, save_models: bool = True) -> Path:
    """Write spec, record, CSV, Markdown, models and (separately) timings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    md, csv_text = render_report([record])
    atomic_write(out / "spec.json", dump_json(record.config).encode())
    atomic_write(out / "record.json", dump_json(_jsonable(record.to_dict())).encode())
    atomic_write(out / "metrics.csv", csv_text.encode())
    atomic_write(out / "report.md", md.encode())
    atomic_write(out / "timing.json", dump_json(_jsonable(record.timing)).encode())
    if save_models:
        for name, model in sorted(record.models.items()):
            write_model(out / "models" / f"{name}.bin", model)
    return out


def load_record(in_dir) -> RunRecord:
    from .io import read_spec
    return RunRecord.from_dict(read_spec(Path(in_dir) / "record.json"))
