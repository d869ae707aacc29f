"""Trainer, evaluator, ablation runner, checkpointing, and reports.

Everything downstream of (config, seeds) is deterministic: model init, eps
draws, batch order, RANSAC, and all tie-breaking derive from seeded
counter-based generators, so identical inputs reproduce identical
checkpoints and metrics bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .config import TrainConfig
from .container import read_container, write_container
from .errors import ConfigError, NumericalAbort, UsageError
from .geometry import backproject_pixel_centers
from .model import RegistrationModel, prep_scene
from .pose import PnPProblem, RansacConfig, pose_errors, ransac_pnp
from .scenegen import generate_dataset

CHECKPOINT_MAGIC = b"XMCK"
CHECKPOINT_VERSION = 1

EVAL_THRESHOLDS = (0.05, 0.10, 0.10)  # IR meters, FMR fraction, RR meters

METRIC_COLUMNS = [
    "scene_id",
    "ir",
    "fmr_flag",
    "rr_flag",
    "rot_err_deg",
    "trans_err_m",
    "rmse_m",
    "mmd",
]


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive moment estimation over named parameter tensors."""

    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / corr1
            v_hat = self.v[name] / corr2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict  # name -> ndarray
    moment1: dict
    moment2: dict
    step: int
    config_hash: str
    gamma_sig: float

    def save(self, path):
        arrays = {}
        for name in sorted(self.params):
            arrays[f"param.{name}"] = self.params[name]
            arrays[f"m1.{name}"] = self.moment1[name]
            arrays[f"m2.{name}"] = self.moment2[name]
        meta = {
            "step": self.step,
            "config_hash": self.config_hash,
            "gamma_sig": self.gamma_sig,
        }
        write_container(
            str(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, [(arrays, meta)]
        )

    @classmethod
    def load(cls, path):
        records = read_container(str(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        if len(records) != 1:
            raise UsageError(f"checkpoint must hold one record, got {len(records)}")
        arrays, meta = records[0]
        params, m1, m2 = {}, {}, {}
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            {"param": params, "m1": m1, "m2": m2}[kind][name] = arr
        return cls(
            params=params,
            moment1=m1,
            moment2=m2,
            step=int(meta["step"]),
            config_hash=meta["config_hash"],
            gamma_sig=float(meta["gamma_sig"]),
        )


def snapshot(model, opt, step, cfg, gamma_sig):
    return Checkpoint(
        params={k: p.data.copy() for k, p in model.params().items()},
        moment1={k: v.copy() for k, v in opt.m.items()},
        moment2={k: v.copy() for k, v in opt.v.items()},
        step=step,
        config_hash=cfg.hash(),
        gamma_sig=gamma_sig,
    )


def restore(checkpoint, in_channels, cfg):
    """Rebuild a model (and optimizer state) from a checkpoint."""
    if checkpoint.config_hash != cfg.hash():
        raise ConfigError("checkpoint config hash does not match this config")
    model = RegistrationModel(in_channels, cfg)
    model.load_param_arrays(checkpoint.params)
    opt = Adam(model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt.m = {k: v.copy() for k, v in checkpoint.moment1.items()}
    opt.v = {k: v.copy() for k, v in checkpoint.moment2.items()}
    opt.t = checkpoint.step
    return model, opt


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # dict per scene
    meta: dict = field(default_factory=dict)

    def mean(self, key):
        vals = [row[key] for row in self.rows]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self):
        return {
            "ir": self.mean("ir"),
            "fmr": self.mean("fmr_flag"),
            "rr": self.mean("rr_flag"),
            "mmd": self.mean("mmd"),
            "n_scenes": len(self.rows),
        }

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(METRIC_COLUMNS)
        for row in self.rows:
            writer.writerow([row[c] for c in METRIC_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def scene_inlier_ratio(sample, matches, thresh):
    """Fraction of predicted matches within ``thresh`` meters in 3D under the
    ground-truth pose; pixels without rendered depth never count."""
    if len(matches) == 0:
        return 0.0
    h, w = sample.depth.shape
    rows, cols = np.divmod(matches.fine[:, 0], w)
    depths = sample.depth[rows, cols]
    ok = np.isfinite(depths)
    if not ok.any():
        return 0.0
    anchors = backproject_pixel_centers(sample.intrinsics, rows[ok], cols[ok], depths[ok])
    cam_pts = sample.gt_pose.apply(sample.cloud.points[matches.fine[ok, 1]])
    dist = np.linalg.norm(cam_pts - anchors, axis=1)
    return float(np.sum(dist < thresh) / len(matches))


def evaluate(model, dataset, preps=None, thresholds=EVAL_THRESHOLDS,
             ransac=None, ransac_seed=0):
    """IR / FMR / RR over a dataset, with pose regression per scene.

    Thresholds are strict inequalities: 3D distance below ``thresholds[0]``,
    inlier ratio above ``thresholds[1]``, scene RMSE below ``thresholds[2]``.
    """
    ir_thresh, fmr_thresh, rr_thresh = thresholds
    ransac_kwargs = dict(ransac or {})
    preps = preps or [prep_scene(s, model.cfg) for s in dataset]
    report = MetricsReport(
        meta={
            "thresholds": thresholds,
            "ransac": {**RansacConfig().__dict__, **ransac_kwargs},
            "synthetic": True,
        }
    )
    for sample, prep in zip(dataset, preps):
        matches, _, info = model.match(sample, prep)
        ir = scene_inlier_ratio(sample, matches, ir_thresh)
        rot_err = trans_err = rmse = float("inf")
        if len(matches) >= 4:
            h, w = sample.depth.shape
            rows, cols = np.divmod(matches.fine[:, 0], w)
            pixels = np.stack([cols + 0.5, rows + 0.5], axis=1)
            problem = PnPProblem(
                pixels,
                sample.cloud.points[matches.fine[:, 1]],
                sample.intrinsics,
                np.maximum(matches.fine_scores, 0.0),
            )
            cfg = RansacConfig(
                seed=ransac_seed + sample.seed, **ransac_kwargs
            )
            estimate = ransac_pnp(problem, cfg)
            if estimate.success:
                rot_err, trans_err, rmse = pose_errors(
                    estimate.transform, sample.gt_pose, sample.cloud.points
                )
        report.rows.append(
            {
                "scene_id": sample.seed,
                "ir": ir,
                "fmr_flag": int(ir > fmr_thresh),
                "rr_flag": int(rmse < rr_thresh),
                "rot_err_deg": rot_err,
                "trans_err_m": trans_err,
                "rmse_m": rmse,
                "mmd": model.modality_mmd(sample, prep),
                "n_matches": len(matches),
            }
        )
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_curve: list  # dicts per step with the four terms
    val_curve: list
    gamma_sig: float


def resolve_gamma(model, dataset, preps, cfg):
    """gamma_sig default: half the entropy sum at initialization."""
    if cfg.gamma_sig is not None:
        return float(cfg.gamma_sig)
    if not cfg.enable_uncertainty:
        return 0.0
    return 0.5 * model.initial_entropy_sum(dataset[0], preps[0])


def train(cfg, dataset, val_dataset=None, preps=None, val_preps=None,
          on_abort_path=None):
    """Seeded full training loop; returns the final checkpoint and curves.

    A non-finite loss aborts with the last snapshot retained (written to
    ``on_abort_path`` when given, and attached to the raised error).
    """
    if not dataset:
        raise UsageError("training dataset is empty")
    in_channels = dataset[0].image_features.shape[2]
    model = RegistrationModel(in_channels, cfg)
    preps = preps or [prep_scene(s, cfg) for s in dataset]
    if val_dataset:
        val_preps = val_preps or [prep_scene(s, cfg) for s in val_dataset]
    opt = Adam(model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    gamma_sig = resolve_gamma(model, dataset, preps, cfg)

    loss_curve = []
    val_curve = []
    last_good = snapshot(model, opt, 0, cfg, gamma_sig)
    n = len(dataset)

    for step in range(cfg.steps):
        step_rng = np.random.default_rng([cfg.seed, 1_000_003, step])
        opt.zero_grads()
        parts_acc = {"coarse": 0.0, "fine": 0.0, "sig": 0.0, "domain": 0.0,
                     "total": 0.0}
        try:
            for j in range(cfg.batch_size):
                idx = (step * cfg.batch_size + j) % n
                with ad.Tape():
                    total, parts, _ = model.train_losses(
                        dataset[idx], preps[idx], step_rng, gamma_sig
                    )
                    ad.backward(ad.mul(total, 1.0 / cfg.batch_size))
                for key in parts_acc:
                    parts_acc[key] += parts[key] / cfg.batch_size
        except NumericalAbort as err:
            if on_abort_path is not None:
                last_good.save(on_abort_path)
            err.checkpoint = last_good
            raise
        opt.step()
        loss_curve.append({"step": step, **parts_acc})

        if cfg.val_every and val_dataset and (step + 1) % cfg.val_every == 0:
            val_rng = np.random.default_rng([cfg.seed, 7_000_003, step])
            vals = []
            for sample, prep in zip(val_dataset, val_preps):
                _, parts, _ = model.train_losses(sample, prep, val_rng, gamma_sig)
                vals.append(parts["total"])
            val_curve.append({"step": step, "val_total": float(np.mean(vals))})
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            last_good = snapshot(model, opt, step + 1, cfg, gamma_sig)

    final = snapshot(model, opt, cfg.steps, cfg, gamma_sig)
    return model, TrainResult(
        checkpoint=final,
        loss_curve=loss_curve,
        val_curve=val_curve,
        gamma_sig=gamma_sig,
    )


# ---------------------------------------------------------------------------
# reports and ablations


def report_uncertainty_separation(model, dataset, preps=None, corrupt_min=0.5):
    """Mean per-patch variance for occlusion-corrupted vs clean patches plus
    a one-sided Welch test that corrupted variance is larger.

    Patches with occluded-pixel fraction >= ``corrupt_min`` count as
    corrupted; only fully clean patches count as clean.
    """
    preps = preps or [prep_scene(s, model.cfg) for s in dataset]
    corrupted, clean = [], []
    for sample, prep in zip(dataset, preps):
        sigma_sq, occ_frac = model.sigma_stats(sample, prep)
        corrupted.extend(sigma_sq[occ_frac >= corrupt_min].tolist())
        clean.extend(sigma_sq[occ_frac == 0.0].tolist())
    if not corrupted:
        raise UsageError("dataset contains no occlusion-corrupted patches")
    if not clean:
        raise UsageError("dataset contains no clean patches")
    result = stats.ttest_ind(corrupted, clean, equal_var=False,
                             alternative="greater")
    return {
        "mean_sigma_sq_corrupted": float(np.mean(corrupted)),
        "mean_sigma_sq_clean": float(np.mean(clean)),
        "n_corrupted": len(corrupted),
        "n_clean": len(clean),
        "p_value": float(result.pvalue),
    }


MODULE_GRID = {
    "BL": dict(enable_interaction=False, enable_uncertainty=False,
               enable_amam=False),
    "M1": dict(enable_interaction=True, enable_uncertainty=False,
               enable_amam=False),
    "M2": dict(enable_interaction=True, enable_uncertainty=True,
               enable_amam=False),
    "M3": dict(enable_interaction=True, enable_uncertainty=False,
               enable_amam=True),
    "full": dict(enable_interaction=True, enable_uncertainty=True,
                 enable_amam=True),
}


@dataclass
class AblationReport:
    panel: str
    rows: list  # dicts: cell, seed, ir, fmr, rr, mmd

    def cell_means(self):
        cells = sorted({row["cell"] for row in self.rows}, key=_cell_order)
        out = []
        for cell in cells:
            sub = [r for r in self.rows if r["cell"] == cell]
            out.append(
                {
                    "cell": cell,
                    "ir": float(np.mean([r["ir"] for r in sub])),
                    "fmr": float(np.mean([r["fmr"] for r in sub])),
                    "rr": float(np.mean([r["rr"] for r in sub])),
                    "mmd": float(np.mean([r["mmd"] for r in sub])),
                    "n_seeds": len(sub),
                }
            )
        return out

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["cell", "seed", "ir", "fmr", "rr", "mmd"])
        for row in self.rows:
            writer.writerow(
                [row["cell"], row["seed"], row["ir"], row["fmr"], row["rr"],
                 row["mmd"]]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def _cell_order(cell):
    order = {"BL": 0, "M1": 1, "M2": 2, "M3": 3, "full": 4}
    return (order.get(cell, 99), str(cell))


def _run_cell(run_cfg, train_cfg, seed_offset):
    scene = run_cfg.scene
    train_seeds = range(
        run_cfg.train_seeds[0] + seed_offset * 100_000,
        run_cfg.train_seeds[1] + seed_offset * 100_000,
    )
    test_seeds = range(
        run_cfg.test_seeds[0] + seed_offset * 100_000,
        run_cfg.test_seeds[1] + seed_offset * 100_000,
    )
    train_set = generate_dataset(scene, train_seeds)
    test_set = generate_dataset(scene, test_seeds)
    model, _ = train(train_cfg, train_set)
    report = evaluate(model, test_set, ransac=run_cfg.ransac)
    summary = report.summary()
    return summary


def ablate(run_cfg, panel="modules", values=None, seeds=(0, 1, 2, 3, 4)):
    """One train+evaluate per grid cell with shared seeds across cells.

    Panels: ``modules`` (BL/M1/M2/M3/full), ``gamma`` (variance budget
    sweep), ``lambda`` (reversal coefficient sweep). Per-cell failures are
    recorded, not raised.
    """
    if panel == "modules":
        cells = [(name, flags) for name, flags in MODULE_GRID.items()]
    elif panel == "gamma":
        values = values if values is not None else (0.25, 0.5, 1.0, 2.0, 4.0)
        cells = [(f"gamma={v}", dict(gamma_sig=None, gamma_scale=v)) for v in values]
    elif panel == "lambda":
        values = values if values is not None else (0.001, 0.003, 0.01, 0.03, 0.1)
        cells = [(f"lambda={v}", dict(lambda_grl=v)) for v in values]
    else:
        raise UsageError(f"unknown ablation panel {panel!r}")

    rows = []
    base = asdict(run_cfg.train)
    for cell_name, overrides in cells:
        gamma_scale = overrides.pop("gamma_scale", None)
        for seed_idx, seed in enumerate(seeds):
            cfg_dict = dict(base)
            cfg_dict.update(overrides)
            cfg_dict["seed"] = seed
            cfg = TrainConfig(**cfg_dict)
            if gamma_scale is not None:
                cfg = _with_scaled_gamma(run_cfg, cfg, gamma_scale, seed_idx)
            try:
                summary = _run_cell(run_cfg, cfg, seed_idx)
                rows.append(
                    {
                        "cell": cell_name,
                        "seed": seed,
                        "ir": summary["ir"],
                        "fmr": summary["fmr"],
                        "rr": summary["rr"],
                        "mmd": summary["mmd"],
                    }
                )
            except Exception as err:  # per-cell failures must not kill the grid
                rows.append(
                    {
                        "cell": cell_name,
                        "seed": seed,
                        "ir": float("nan"),
                        "fmr": float("nan"),
                        "rr": float("nan"),
                        "mmd": float("nan"),
                        "error": f"{type(err).__name__}: {err}",
                    }
                )
    return AblationReport(panel=panel, rows=rows)


def _with_scaled_gamma(run_cfg, cfg, scale, seed_idx):
    """Resolve the auto gamma for this seed's data, then scale it."""
    seeds = range(
        run_cfg.train_seeds[0] + seed_idx * 100_000,
        run_cfg.train_seeds[0] + seed_idx * 100_000 + 1,
    )
    probe = generate_dataset(run_cfg.scene, seeds)
    model = RegistrationModel(probe[0].image_features.shape[2], cfg)
    prep = prep_scene(probe[0], cfg)
    base_gamma = 0.5 * model.initial_entropy_sum(probe[0], prep)
    return TrainConfig(**{**asdict(cfg), "gamma_sig": base_gamma * scale})


def loss_curve_csv(curve, path=None):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "coarse", "fine", "sig", "domain", "total"])
    for row in curve:
        writer.writerow(
            [row["step"], row["coarse"], row["fine"], row["sig"], row["domain"],
             row["total"]]
        )
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def dump_summary_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
