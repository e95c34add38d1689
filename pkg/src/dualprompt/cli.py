"""Command-line entry point: ``dualprompt {gen,train,infer,ablate,features,prognosis}``."""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .adaptation import PrognosisConfig
from .experiments import export_features, format_ablation, run_ablation, run_prognosis, write_feature_table
from .inference import segment
from .metrics import dice_score
from .model import DualPromptModel, ModelConfig, load_checkpoint
from .phantom import PhantomSpec, generate_dataset
from .text import make_prompt
from .training import ConfigurationError, TrainConfig, evaluate, load_cases, train
from .volume_io import FormatError, Volume, load_mask, load_volume, preprocess, save_mask, save_volume

log = logging.getLogger("dualprompt")

TEMPLATE_RE = re.compile(r"^(ct|mr|pet):([a-z0-9_]+)$", re.IGNORECASE)


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{p}: top level must be an object")
    return cfg


def _section(cfg: dict, name: str, seed: Optional[int]) -> dict:
    out = dict(cfg.get(name, {}))
    if seed is not None:
        out["seed"] = seed
    return out


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _expand_prompt(text: str, kind: str) -> str:
    """``ct:liver`` expands through the prompt template; anything else is used verbatim."""
    m = TEMPLATE_RE.match(text.strip())
    return make_prompt(m.group(1).lower(), m.group(2).lower(), kind) if m else text


def _require(path: Optional[str], what: str) -> Path:
    if path is None:
        raise ConfigurationError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_gen(args, cfg) -> dict:
    spec = PhantomSpec.from_dict(_section(cfg, "phantom", args.seed))
    manifest = generate_dataset(spec, args.out)
    return {"out": str(args.out), "cases": len(manifest["cases"]), "splits": {k: len(v) for k, v in manifest["splits"].items()}}


def cmd_train(args, cfg) -> dict:
    manifest = _require(args.manifest, "manifest")
    tcfg = TrainConfig.from_dict(_section(cfg, "train", args.seed))
    torch.manual_seed(tcfg.seed)
    model = DualPromptModel(ModelConfig.from_dict(cfg.get("model", {})))
    data = load_cases(manifest)
    result = train(model, data, tcfg, out_dir=args.out)
    report = {
        "checkpoint": str(result.checkpoint),
        "best_epoch": result.best_epoch,
        "best_val_dsc": result.best_val_dsc,
        "test": evaluate(model, data.split("test")),
    }
    _write_json(Path(args.out) / "report.json", report)
    return report


def cmd_infer(args, cfg) -> dict:
    ckpt = _require(args.checkpoint, "checkpoint")
    vol_path = _require(args.volume, "volume")
    if args.t1 is None or args.t2 is None:
        raise ConfigurationError("--t1 and --t2 are required")
    model, _ = load_checkpoint(ckpt)
    volume = preprocess(load_volume(vol_path))
    t1, t2 = _expand_prompt(args.t1, "context"), _expand_prompt(args.t2, "target")
    mask, prob = segment(volume, t1, t2, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mask(mask, out / "mask")
    save_volume(Volume(prob.astype(np.float32), volume.spacing, volume.modality, volume.region, volume.id), out / "prob")
    report = {"t1": t1, "t2": t2, "volume": str(vol_path), "foreground_voxels": int(mask.data.sum())}
    if args.reference:
        report["dsc"] = {}
        for ref in args.reference:
            gt = load_mask(_require(ref, "reference"))
            report["dsc"][gt.organ] = dice_score(mask, gt)
    _write_json(out / "report.json", report)
    return report


def cmd_ablate(args, cfg) -> dict:
    model, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    data = load_cases(_require(args.manifest, "manifest"), splits=(args.split,))
    report = run_ablation(model, data.split(args.split), list(data.regions))
    _write_json(Path(args.out) / "ablation.json", report)
    print(format_ablation(report))
    return {k: v["mean_dsc"] for k, v in report["conditions"].items()}


def cmd_features(args, cfg) -> dict:
    model, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    data = load_cases(_require(args.manifest, "manifest"), splits=(args.split,))
    cases = data.split(args.split)
    modality = args.modality or cases[0].modality
    region = args.region or cases[0].region
    cases = [c for c in cases if c.modality == modality and c.region == region]
    report = export_features(model, cases, list(data.regions), data.modalities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_table(report, out / "features.tsv")
    summary = {
        "modality": modality,
        "region": region,
        "rows": len(report["rows"]),
        "separation": report["separation"],
        "set_b_max_spread": report["set_b_max_spread"],
    }
    _write_json(out / "features.json", summary)
    return summary


def cmd_prognosis(args, cfg) -> dict:
    model, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    pcfg = PrognosisConfig(**_section(cfg, "prognosis", args.seed))
    report = run_prognosis(model, _require(args.manifest, "manifest"), pcfg, args.modalities, out_dir=args.out)
    _write_json(Path(args.out) / "prognosis.json", report)
    print(f"trainable fraction: {max(m['trainable_fraction'] for m in report['modalities'].values()):.4%}")
    return {"ci": {m: v["ci"] for m, v in report["modalities"].items()}, "fused_ci": report["fused_ci"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualprompt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config with phantom/model/train/prognosis sections")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("gen", cmd_gen, "write a phantom dataset")
    p = add("train", cmd_train, "train on a manifest")
    p.add_argument("--manifest")
    p = add("infer", cmd_infer, "segment one volume with a prompt pair")
    p.add_argument("--checkpoint")
    p.add_argument("--volume", help="volume sidecar (.json)")
    p.add_argument("--t1", help="context prompt, raw text or modality:region")
    p.add_argument("--t2", help="target prompt, raw text or modality:organ")
    p.add_argument("--reference", nargs="*", help="ground-truth masks to score against")
    for name, fn, help_ in [("ablate", cmd_ablate, "prompt ablation table"), ("features", cmd_features, "export bottleneck features")]:
        p = add(name, fn, help_)
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--split", default="test")
        if name == "features":
            p.add_argument("--modality")
            p.add_argument("--region")
    p = add("prognosis", cmd_prognosis, "LoRA prognosis fine-tuning and CI")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--modalities", nargs="+", default=["ct", "pet"])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        cfg = _load_config(args.config)
        result = args.fn(args, cfg)
    except (FileNotFoundError, FormatError, ConfigurationError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
