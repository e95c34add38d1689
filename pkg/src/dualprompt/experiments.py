"""Desk-scale experiment protocols: prompt ablations, feature export and prognosis."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.stats import spearmanr

from .adaptation import (
    PrognosisConfig,
    apply_lora,
    attach_prognosis_head,
    finetune_prognosis,
    late_fusion,
    parameter_report,
    predict_risk,
    save_adapters,
)
from .inference import sliding_window_probs
from .metrics import concordance_index, dice_score
from .model import DualPromptModel
from .text import make_prompt
from .training import Case, load_cases

__all__ = [
    "CONDITIONS",
    "AblationCondition",
    "next_modality",
    "next_region",
    "run_ablation",
    "format_ablation",
    "PUBLISHED_REFERENCE",
    "export_features",
    "separation_statistic",
    "write_feature_table",
    "run_prognosis",
]

log = logging.getLogger(__name__)

MODALITY_CYCLE = ("ct", "mr", "pet")

# Published full-scale numbers, kept for side-by-side display only.
PUBLISHED_REFERENCE = {
    "ablation_bcv": {"baseline": 86.71, "modality_t1_mismatch": 33.00},
    "prognosis_ci": {"coxph": 0.65, "deephit": 0.66, "dual_prompt": 0.69},
}


def next_modality(modality: str) -> str:
    return MODALITY_CYCLE[(MODALITY_CYCLE.index(modality) + 1) % len(MODALITY_CYCLE)]


def next_region(region: str, regions: Sequence[str]) -> str:
    regions = sorted(regions)
    if len(regions) < 2:
        raise ValueError("region mismatch needs at least two regions")
    return regions[(regions.index(region) + 1) % len(regions)]


@dataclass(frozen=True)
class AblationCondition:
    """Which prompt fields are swapped for the next value in a fixed cycle."""

    name: str
    t1_modality: bool = False
    t1_region: bool = False
    t2_modality: bool = False

    def prompts(self, modality: str, region: str, organ: str, regions: Sequence[str]) -> Tuple[str, str]:
        m1 = next_modality(modality) if self.t1_modality else modality
        r1 = next_region(region, regions) if self.t1_region else region
        m2 = next_modality(modality) if self.t2_modality else modality
        return make_prompt(m1, r1, "context"), make_prompt(m2, organ, "target")


CONDITIONS = (
    AblationCondition("baseline"),
    AblationCondition("modality_t1_mismatch", t1_modality=True),
    AblationCondition("modality_t2_mismatch", t2_modality=True),
    AblationCondition("modality_both_mismatch", t1_modality=True, t2_modality=True),
    AblationCondition("region_t1_mismatch", t1_region=True),
    AblationCondition("organ_control"),
)


def _macro(per_organ: Dict[str, List[float]]) -> Tuple[float, Dict[str, float]]:
    means = {o: float(np.mean(v)) for o, v in per_organ.items()}
    return (float(np.mean(list(means.values()))) if means else float("nan")), means


def run_ablation(model: DualPromptModel, cases: Sequence[Case], regions: Sequence[str], threshold: float = 0.5) -> dict:
    """Mean DSC under every prompt condition.

    The organ-control row reports prompted-organ DSC alongside, for each
    prediction, the largest DSC it reaches against any other organ present in
    the same volume.
    """
    if not cases:
        raise ValueError("ablation needs at least one case")
    scores: Dict[str, Dict[str, List[float]]] = {c.name: {} for c in CONDITIONS}
    overlaps: List[float] = []
    for case in cases:
        organs = list(case.masks)
        # group target prompts by context prompt so each context costs one backbone pass
        requests: Dict[str, List[Tuple[str, str, str]]] = {}
        for cond in CONDITIONS:
            for organ in organs:
                t1, t2 = cond.prompts(case.modality, case.region, organ, regions)
                requests.setdefault(t1, []).append((cond.name, organ, t2))
        for t1, items in requests.items():
            t2s = sorted({t2 for _, _, t2 in items})
            probs = dict(zip(t2s, sliding_window_probs(model, case.volume.data, case.modality, t1, t2s)))
            for name, organ, t2 in items:
                pred = probs[t2] >= threshold
                scores[name].setdefault(organ, []).append(dice_score(pred, case.masks[organ]))
                if name == "organ_control":
                    others = [dice_score(pred, case.masks[o]) for o in organs if o != organ]
                    overlaps.append(max(others) if others else 0.0)
    baseline = _macro(scores["baseline"])[0]
    rows = {}
    for cond in CONDITIONS:
        mean, per_organ = _macro(scores[cond.name])
        row = {"mean_dsc": mean, "delta": mean - baseline, "per_organ": per_organ}
        if cond.name == "organ_control":
            row["prompted_dsc"] = mean
            row["unprompted_overlap"] = float(np.mean(overlaps))
        rows[cond.name] = row
    return {"conditions": rows, "n_cases": len(cases), "reference": PUBLISHED_REFERENCE["ablation_bcv"]}


def format_ablation(report: dict) -> str:
    lines = [f"{'condition':<24} {'mean DSC':>9} {'delta':>8}"]
    for name, row in report["conditions"].items():
        line = f"{name:<24} {100 * row['mean_dsc']:9.2f} {100 * row['delta']:+8.2f}"
        if "unprompted_overlap" in row:
            line += f"   unprompted overlap {100 * row['unprompted_overlap']:.2f}"
        lines.append(line)
    return "\n".join(lines)


# -- feature export --------------------------------------------------------------


@torch.no_grad()
def _pooled_bottleneck(model: DualPromptModel, case: Case, t1: str) -> np.ndarray:
    x = torch.from_numpy(case.volume.data[None, None].astype(np.float32)).to(model.dtype)
    _, f_dense = model.features(x, case.modality, t1)
    return f_dense.mean(dim=(2, 3, 4))[0].double().numpy()


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return 1.0 - float(a @ b / denom) if denom > 0 else 0.0


def separation_statistic(vectors: np.ndarray, labels: Sequence[str]) -> dict:
    """Mean cosine distance within label groups vs. between them."""
    within, between = [], []
    n = len(labels)
    for i in range(n):
        for j in range(i + 1, n):
            (within if labels[i] == labels[j] else between).append(_cosine_distance(vectors[i], vectors[j]))
    w = float(np.mean(within)) if within else 0.0
    b = float(np.mean(between)) if between else 0.0
    return {"within": w, "between": b, "ratio": b / w if w > 0 else float("inf")}


def _pca2(vectors: np.ndarray) -> np.ndarray:
    centred = vectors - vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return centred @ vt[:2].T


def export_features(
    model: DualPromptModel,
    cases: Sequence[Case],
    regions: Sequence[str],
    modalities: Sequence[str] = MODALITY_CYCLE,
) -> dict:
    """Pooled bottleneck vectors for two prompt sets over ``cases``.

    Set A fixes the target prompt and sweeps every context prompt; set B fixes
    the correct context prompt and sweeps the region's target prompts.
    """
    if not cases:
        raise ValueError("feature export needs at least one case")
    contexts = [make_prompt(m, r, "context") for m in modalities for r in sorted(regions)]
    rows = []
    for case in cases:
        organs = list(case.masks)
        fixed_t2 = make_prompt(case.modality, organs[0], "target")
        for t1 in contexts:
            rows.append(("A", case.volume.id, t1, fixed_t2, _pooled_bottleneck(model, case, t1)))
        t1 = make_prompt(case.modality, case.region, "context")
        for organ in organs:
            # a fresh pass per target prompt, so the spread check below is not vacuous
            rows.append(("B", case.volume.id, t1, make_prompt(case.modality, organ, "target"), _pooled_bottleneck(model, case, t1)))
    vectors = np.stack([r[4] for r in rows])
    proj = _pca2(vectors)
    a_idx = [i for i, r in enumerate(rows) if r[0] == "A"]
    sep = separation_statistic(vectors[a_idx], [rows[i][2] for i in a_idx])
    b_groups: Dict[Tuple[str, str], List[np.ndarray]] = {}
    for r in rows:
        if r[0] == "B":
            b_groups.setdefault((r[1], r[2]), []).append(r[4])
    b_spread = max(float(np.abs(np.stack(g) - g[0]).max()) for g in b_groups.values())
    return {
        "rows": [
            {"set": s, "volume_id": vid, "t1": t1, "t2": t2, "pc": proj[i].tolist(), "vector": v.tolist()}
            for i, (s, vid, t1, t2, v) in enumerate(rows)
        ],
        "separation": sep,
        "set_b_max_spread": b_spread,
        "n_volumes": len(cases),
    }


def write_feature_table(report: dict, path) -> Path:
    """Tab-separated table: set, volume_id, t1, t2, pc1, pc2, f0..fN."""
    path = Path(path)
    rows = report["rows"]
    dim = len(rows[0]["vector"]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["set", "volume_id", "t1", "t2", "pc1", "pc2"] + [f"f{i}" for i in range(dim)])
        for r in rows:
            w.writerow([r["set"], r["volume_id"], r["t1"], r["t2"]] + [repr(x) for x in r["pc"] + r["vector"]])
    return path


# -- prognosis -------------------------------------------------------------------


def _base_snapshot(model: DualPromptModel) -> Dict[str, bytes]:
    return {n: t.detach().cpu().numpy().tobytes() for n, t in model.state_dict().items()}


def _base_unchanged(model: DualPromptModel, snapshot: Dict[str, bytes]) -> bool:
    current = {}
    for name, t in model.state_dict().items():
        if ".lora_" in name or name.startswith("prognosis."):
            continue
        current[name.replace(".base.", ".")] = t.detach().cpu().numpy().tobytes()
    return current == snapshot


def run_prognosis(
    base: DualPromptModel,
    manifest_path,
    cfg: Optional[PrognosisConfig] = None,
    modalities: Sequence[str] = ("ct", "pet"),
    out_dir=None,
) -> dict:
    """Per-modality LoRA fine-tuning on the survival cohort, then CI per modality and fused."""
    cfg = cfg or PrognosisConfig()
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    records = {r["subject_id"]: r for r in json.loads((manifest_path.parent / manifest["survival"]).read_text())["records"]}
    region = next(iter(records.values()))["region"]
    data = load_cases(manifest_path)
    t0 = time.time()
    report = {"region": region, "modalities": {}, "config": cfg.to_dict(), "reference": PUBLISHED_REFERENCE["prognosis_ci"]}
    test_risks: Dict[str, Dict[str, float]] = {}
    for modality in modalities:
        cases = [c for c in data.cases if c.region == region and c.modality == modality and c.subject_id in records]
        train = [c for c in cases if c.split in ("train", "val")]
        test = [c for c in cases if c.split == "test"]
        if not train or not test:
            raise ValueError(f"no {modality} cases for the {region} survival cohort")
        model = copy.deepcopy(base)
        snapshot = _base_snapshot(model)
        lora = apply_lora(model, r=cfg.lora_rank, alpha=cfg.lora_alpha, seed=cfg.seed)
        attach_prognosis_head(model, cfg.n_bins, seed=cfg.seed)
        params = parameter_report(model)
        history = finetune_prognosis(model, [c.volume for c in train], [records[c.subject_id] for c in train], cfg)
        risks = {c.subject_id: predict_risk(c.volume, records[c.subject_id], model).risk for c in test}
        test_risks[modality] = risks
        sids = sorted(risks)
        ci = concordance_index(
            [risks[s] for s in sids], [records[s]["time"] for s in sids], [records[s]["event"] for s in sids]
        )
        rho = spearmanr([risks[s] for s in sids], [records[s]["lesion_fraction"] for s in sids]).statistic
        report["modalities"][modality] = {
            "ci": ci,
            "spearman_lesion": float(rho),
            "n_train": len(train),
            "n_test": len(test),
            "final_loss": history[-1],
            "trainable": params["trainable"],
            "total": params["total"],
            "trainable_fraction": params["fraction"],
            "lora_layers": lora["layers"],
            "base_unchanged": _base_unchanged(model, snapshot),
        }
        if out_dir is not None:
            save_adapters(model, Path(out_dir) / f"adapter_{modality}.ckpt")
    common = sorted(set.intersection(*(set(r) for r in test_risks.values())))
    fused = [late_fusion([test_risks[m][s] for m in modalities]) for s in common]
    report["fused_ci"] = concordance_index(fused, [records[s]["time"] for s in common], [records[s]["event"] for s in common])
    report["best_single_ci"] = max(v["ci"] for v in report["modalities"].values())
    report["runtime_s"] = time.time() - t0
    return report

