"""Command-line interface.

Subcommands: gen-data (phantom spec -> dataset containers), train, eval,
predict, ablate and grid (qualitative montage). Config files are YAML
mappings of TrainConfig fields (nested sections for generator/critic/weights);
``--seed`` overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import (
    Modality,
    Study,
    TrainingSample,
    extract_slices,
    load_dataset,
    load_samples,
    reassemble_volumes,
    save_dataset,
)
from .metrics import RandomConvExtractor, evaluate_dataset
from .phantom import PhantomSpec, generate_phantom
from .training import (
    TrainConfig,
    ablate,
    config_from_dict,
    config_to_dict,
    fit,
    load_checkpoint,
    write_history,
)

logger = logging.getLogger("dcesynth")


def _load_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    return data or {}


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    config = config_from_dict(_load_yaml(path))
    if seed is not None:
        config.seed = seed
    return config


def _phantom_spec_from_file(path: str | None) -> PhantomSpec:
    data = _load_yaml(path)
    known = {f.name for f in fields(PhantomSpec)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown PhantomSpec field: {key!r}")
        if key in ("organ_intensity", "background_intensity"):
            kwargs[key] = {Modality(k): float(v) for k, v in value.items()}
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return PhantomSpec(**kwargs)


def cmd_gen_data(args) -> int:
    spec = _phantom_spec_from_file(args.spec)
    studies = [generate_phantom(spec, args.seed + i) for i in range(args.studies)]
    n_val = int(round(args.studies * args.val_fraction))
    train_studies = studies[: args.studies - n_val]
    val_studies = studies[args.studies - n_val :]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_studies, out / "train.dceds")
    print(f"wrote {len(train_studies)} studies to {out / 'train.dceds'}")
    if val_studies:
        save_dataset(val_studies, out / "val.dceds")
        print(f"wrote {len(val_studies)} studies to {out / 'val.dceds'}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    dataset = load_samples(args.data)
    val = load_samples(args.val) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.json").write_text(json.dumps(config.run_metadata(), indent=2))
    (out / "config.json").write_text(json.dumps(config_to_dict(config), indent=2))
    state, history = fit(dataset, config, val, out_dir=out, resume_from=args.resume)
    write_history(history, out)
    last = history.steps[-1]
    print(f"trained {last.step} steps; final total loss {last.total:.4f}")
    if history.evals:
        _, report = history.evals[-1]
        print(report.to_table())
    return 0


def _load_model(checkpoint: str):
    state, config = load_checkpoint(checkpoint)
    state.generator.eval()
    return state, config


def cmd_eval(args) -> int:
    state, _ = _load_model(args.checkpoint)
    samples = load_samples(args.data)
    report = evaluate_dataset(state.generator, samples, RandomConvExtractor())
    print(report.to_table())
    if args.out:
        report.to_json(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    state, _ = _load_model(args.checkpoint)
    studies = load_dataset(args.data)
    predicted = []
    with torch.no_grad():
        for study in studies:
            samples = extract_slices(study)
            inputs = torch.as_tensor(np.stack([s.input for s in samples]))
            out = state.generator(inputs).numpy()
            pred_samples = [
                TrainingSample(s.input, out[i], s.study_id, s.slice_index)
                for i, s in enumerate(samples)
            ]
            volumes = reassemble_volumes(pred_samples)
            new_volumes = dict(study.volumes)
            for m in (Modality.DCE_EARLY, Modality.DCE_LATE):
                vol = study.volumes[m]
                new_volumes[m] = type(vol)(volumes[m], m, vol.spacing)
            predicted.append(
                Study(id=study.id, volumes=new_volumes, lesion_mask=study.lesion_mask)
            )
    save_dataset(predicted, args.out)
    print(f"wrote {len(predicted)} predicted studies to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config, args.seed)
    dataset = load_samples(args.data)
    val = load_samples(args.val) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablate(dataset, config, val, out_dir=out)
    text = table.to_text()
    print(text)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2))
    print(f"wrote {out / 'ablation.txt'} and {out / 'ablation.json'}")
    return 0


def cmd_grid(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    state, _ = _load_model(args.checkpoint)
    studies = load_dataset(args.data)[: args.studies]
    columns = ["T2W", "ADC", "T1 pre", "GT early", "pred early", "GT late", "pred late"]
    fig, axes = plt.subplots(
        len(studies), len(columns), figsize=(2.0 * len(columns), 2.0 * len(studies)),
        squeeze=False,
    )
    with torch.no_grad():
        for row, study in enumerate(studies):
            k = study.shape[2] // 2 if args.slice < 0 else args.slice
            if k >= study.shape[2]:
                raise ValueError(f"slice {k} out of range for depth {study.shape[2]}")
            samples = extract_slices(study)
            sample = samples[k]
            pred = state.generator(torch.as_tensor(sample.input)[None])[0].numpy()
            panels = [
                sample.input[0], sample.input[1], sample.input[2],
                sample.target[0], pred[0], sample.target[1], pred[1],
            ]
            for col, (name, img) in enumerate(zip(columns, panels)):
                ax = axes[row][col]
                ax.imshow(img, cmap="gray", vmin=0, vmax=1)
                ax.set_axis_off()
                if row == 0:
                    ax.set_title(name, fontsize=9)
            axes[row][0].set_ylabel(study.id, fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcesynth",
        description="Synthesize early/late DCE-MRI from non-contrast MRI (desk-scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate phantom dataset containers")
    p.add_argument("--spec", help="PhantomSpec YAML file (defaults when omitted)")
    p.add_argument("--studies", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", help="TrainConfig YAML file (defaults when omitted)")
    p.add_argument("--data", required=True, help="training container")
    p.add_argument("--val", help="validation container")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="synthesize DCE volumes for a container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output container path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare the loss configurations")
    p.add_argument("--config", help="TrainConfig YAML file (defaults when omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grid", help="input/GT/prediction montage image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--studies", type=int, default=4)
    p.add_argument("--slice", type=int, default=-1, help="slice index (-1 = middle)")
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
