"""Orquestrador CLI do pipeline de regressão bayesiana de forças de tração."""

from dotenv import load_dotenv
load_dotenv()

import argparse
import copy
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from src.errors import ConfigInvalid, TFMError
from src.run_manifest import RunManifest
from src.utils import file_digest, load_config, parse_levels, setup_logging

logger = logging.getLogger(__name__)


def _parse_size(text: str) -> tuple[int, int]:
    """'64x48' -> (altura 64, largura 48)"""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tamanho inválido: {text!r} (use HxW)")
    return h, w


def _parse_pixel(text: str) -> tuple[int, int]:
    """'x,y' -> (x, y)"""
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel inválido: {text!r} (use x,y)")
    return x, y


def _parse_on_off(text: str) -> bool:
    if text.lower() not in ("on", "off"):
        raise argparse.ArgumentTypeError("use on ou off")
    return text.lower() == "on"


# ---------------------------------------------------------------------------
# Passos
# ---------------------------------------------------------------------------
def step_synth(config: dict, args, manifest: RunManifest) -> None:
    from src.synth_data import SynthConfig, synthesize_frameset, write_frameset

    section = config.get("synthesis", {})
    cfg = SynthConfig.from_config(config)
    if args.frames_per_cell is not None:
        cfg = replace(cfg, frames_per_cell=args.frames_per_cell)
    frames = args.frames
    if frames is None:
        frames = args.cells * cfg.frames_per_cell if args.cells is not None else section.get("frames", 20)
    if frames < 1:
        raise ConfigInvalid(f"--frames deve ser >= 1: {frames}")
    height, width = args.size or (section.get("height", 64), section.get("width", 64))
    seed = args.seed if args.seed is not None else section.get("seed", 7)

    fs = synthesize_frameset(frames, height, width, seed, hetero=args.hetero, cfg=cfg)
    write_frameset(fs, args.out)

    manifest.resolved = {"synthesis": {**asdict(cfg), "frames": frames, "height": height, "width": width}}
    manifest.seeds = {"data": seed}
    manifest.artifacts = {"frameset": str(args.out)}


def step_train(config: dict, args, manifest: RunManifest) -> None:
    from src.audit_logger import AuditLogger
    from src.augmentation import AugmentConfig, mask_forces
    from src.model import ModelConfig, build
    from src.synth_data import read_frameset
    from src.training import TrainConfig, train, write_loss_csv

    model_cfg = ModelConfig.from_config(config, preset=args.preset)
    train_cfg = TrainConfig.from_config(
        config, preset=args.preset, epochs=args.epochs, steps_per_epoch=args.steps,
        batch_size=args.batch, crop=args.crop, learning_rate=args.lr, seed=args.seed,
    )
    aug_cfg = AugmentConfig.from_config(config, crop=train_cfg.crop)
    fs = mask_forces(read_frameset(args.data), aug_cfg.tukey_alpha)

    model = build(model_cfg, train_cfg.seed)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    audit_path = args.audit_log or config["paths"].get("audit_log", "outputs/audit_log.jsonl")
    with AuditLogger(audit_path) as audit:
        result = train(model, fs, train_cfg, aug_cfg, checkpoint_path=args.out, audit=audit)
    write_loss_csv(result.history, loss_csv)

    first, last = result.history["loss"].iloc[0], result.history["loss"].iloc[-1]
    logger.info("=== Treino concluído ===")
    logger.info(f"  Parâmetros: {model.parameter_count}")
    logger.info(f"  Loss: {first:.4f} -> {last:.4f}")
    logger.info(f"  Checkpoint: {args.out}")

    manifest.resolved = {"model": asdict(model_cfg), "training": asdict(train_cfg),
                       "augmentation": asdict(aug_cfg)}
    manifest.seeds = {"train": train_cfg.seed}
    manifest.artifacts = {"data": str(args.data), "checkpoint": str(args.out),
                          "loss_csv": loss_csv, "audit_log": audit_path}
    manifest.artifacts["checkpoint_sha256"] = file_digest(args.out)


def _inference_defaults(config: dict, args) -> tuple[int, int, list[float], float]:
    from src.augmentation import AugmentConfig

    section = config.get("inference", {})
    samples = args.mc_samples if args.mc_samples is not None else section.get("mc_samples", 32)
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    levels = section.get("levels", [0.5, 0.9])
    if getattr(args, "quantiles", None):
        levels = parse_levels(args.quantiles)
    return samples, seed, levels, AugmentConfig.from_config(config).tukey_alpha


def step_predict(config: dict, args, manifest: RunManifest) -> None:
    from src.inference import predict_frameset, write_prediction_dir
    from src.model import load_checkpoint
    from src.synth_data import read_frameset

    samples, seed, levels, alpha = _inference_defaults(config, args)
    model = load_checkpoint(args.model)
    fs = read_frameset(args.data)
    predictions = predict_frameset(model, fs, samples, seed, levels)
    meta = {"data": str(args.data), "model": str(args.model), "seed": seed, "tukey_alpha": alpha}
    write_prediction_dir(predictions, args.out, meta)

    manifest.resolved = {"inference": {"mc_samples": samples, "levels": levels, "seed": seed,
                                       "tukey_alpha": alpha}}
    manifest.seeds = {"inference": seed}
    manifest.artifacts = {"model": str(args.model), "data": str(args.data), "predictions": str(args.out)}


def step_eval(config: dict, args, manifest: RunManifest) -> None:
    from src.metrics import evaluate_mae, write_eval_csv
    from src.model import load_checkpoint
    from src.synth_data import read_frameset

    samples, seed, _, alpha = _inference_defaults(config, args)
    model = load_checkpoint(args.model)
    fs = read_frameset(args.data)
    report = evaluate_mae(model, fs, samples, seed, name=args.name or Path(args.data).name,
                          tukey_alpha=alpha)
    write_eval_csv(report, args.report)

    manifest.resolved = {"inference": {"mc_samples": samples, "seed": seed, "tukey_alpha": alpha}}
    manifest.seeds = {"inference": seed}
    manifest.artifacts = {"model": str(args.model), "data": str(args.data), "report": str(args.report)}


def step_plot(config: dict, args, manifest: RunManifest) -> None:
    from src.inference import pixel_series_from_predictions
    from src.report_generator import generate_pixel_series_plot
    from src.utils import write_csv

    series = pixel_series_from_predictions(args.pred, args.pixel)
    write_csv(args.out, list(series.columns), series.itertuples(index=False, name=None))
    logger.info(f"Série do pixel {args.pixel} salva em {args.out} ({len(series)} frames)")
    manifest.artifacts = {"predictions": str(args.pred), "series": str(args.out)}
    if args.figure:
        generate_pixel_series_plot(series, args.figure, args.pixel)
        manifest.artifacts["figure"] = str(args.figure)


def step_report(config: dict, args, manifest: RunManifest) -> None:
    from src.metrics import read_eval_csv
    from src.report_generator import (
        generate_frame_strip,
        generate_latex_tables,
        generate_mae_over_frames_plot,
        generate_prediction_panels,
    )

    out_dir = args.out or config["paths"]["outputs"]
    manifest.artifacts = {"output_dir": str(out_dir)}
    if args.eval:
        reports = [read_eval_csv(path) for path in args.eval]
        manifest.artifacts["latex"] = generate_latex_tables(reports, out_dir)
        manifest.artifacts["mae_figure"] = generate_mae_over_frames_plot(reports, out_dir)
    if args.pred:
        manifest.artifacts["panels"] = generate_prediction_panels(args.pred, args.frame, out_dir)
        if args.pixel is not None:
            manifest.artifacts["frame_strip"] = generate_frame_strip(args.pred, args.pixel, out_dir)
    if not args.eval and not args.pred:
        raise ConfigInvalid("report precisa de --eval e/ou --pred")


STEPS = {
    "synth": step_synth,
    "train": step_train,
    "predict": step_predict,
    "eval": step_eval,
    "plot": step_plot,
    "report": step_report,
}


# ---------------------------------------------------------------------------
# Argumentos
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml",
                        help="Caminho para o arquivo de configuração (default: config.yaml)")
    common.add_argument("--manifest", default=None,
                        help="Onde gravar o RunManifest (default: outputs/runs/<comando>-<data>.json)")

    parser = argparse.ArgumentParser(
        description="TFM-Bayes: predição de forças de tração com incerteza via MC dropout"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Gera um frameset sintético")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--cells", type=int, default=None, help="Número de células (frames = cells x frames-per-cell)")
    p.add_argument("--frames-per-cell", type=int, default=None)
    p.add_argument("--size", type=_parse_size, default=None, help="HxW, ex.: 64x64")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hetero", type=_parse_on_off, default=False, help="on|off")

    p = sub.add_parser("train", parents=[common], help="Treina o modelo")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="Checkpoint de saída")
    p.add_argument("--preset", choices=["desk", "paper"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--audit-log", default=None)

    p = sub.add_parser("predict", parents=[common], help="Predição MC dropout por frame")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--quantiles", default=None, help="Níveis de confiança, ex.: 0.5,0.9")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="MAE por frame")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--name", default=None, help="Nome do conjunto no relatório")

    p = sub.add_parser("plot", parents=[common], help="Série temporal de um pixel")
    p.add_argument("--pred", required=True)
    p.add_argument("--pixel", type=_parse_pixel, required=True, help="x,y")
    p.add_argument("--out", required=True)
    p.add_argument("--figure", default=None)

    p = sub.add_parser("report", parents=[common], help="Figuras e tabela LaTeX")
    p.add_argument("--eval", nargs="*", default=None, help="CSVs gerados por eval")
    p.add_argument("--pred", default=None)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--pixel", type=_parse_pixel, default=None, help="x,y: gera a tira de frames com o pixel marcado")
    p.add_argument("--out", default=None)

    p = sub.add_parser("rerun", parents=[common], help="Reexecuta um RunManifest")
    p.set_defaults(rerun=True)
    return parser


def execute(args, argv: list[str], config: dict) -> RunManifest:
    """Roda um passo com a config já carregada e grava o RunManifest."""
    os.environ.setdefault("TFM_THREADS", str(config.get("engine", {}).get("threads", 1)))
    manifest = RunManifest(command=args.command, argv=list(argv), config=copy.deepcopy(config))

    start_time = time.time()
    with threadpool_limits(limits=1):
        STEPS[args.command](config, args, manifest)
    manifest.finish(time.time() - start_time)
    runs_dir = config["paths"].get("runs", "outputs/runs/")
    manifest.write(args.manifest or manifest.default_path(runs_dir))
    return manifest


def run(argv: list[str]) -> None:
    args = build_parser().parse_args(argv)

    if args.command == "rerun":
        if not args.manifest:
            raise ConfigInvalid("rerun exige --manifest")
        previous = RunManifest.read(args.manifest)
        if not previous.config:
            raise ConfigInvalid(f"{args.manifest} não guarda a config da execução")
        logger.info(f"Reexecutando '{previous.command}' a partir de {args.manifest} (config do manifest)")
        execute(build_parser().parse_args(previous.argv), previous.argv, previous.config)
        return

    execute(args, argv, load_config(args.config))


def main(argv: Optional[list[str]] = None) -> int:
    setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        run(argv)
    except TFMError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"Erro de IO: {e}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
