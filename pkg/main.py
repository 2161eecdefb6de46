import argparse
import json
import logging
import os
import subprocess
import sys
from typing import List, Optional, Sequence

from domain.config import RunConfig, load_config
from domain.errors import DetectorError

logger = logging.getLogger("leukodet")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_file: Optional[str] = None) -> None:
    """Configura il logging su console e, se indicato, su file"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config, args.set or [])
    setup_logging(os.path.join(config.train.output_dir, "training.log"))
    return config


def cmd_train(args: argparse.Namespace) -> int:
    from training.trainer import Trainer

    config = _load(args)
    trainer = Trainer(config)
    if args.resume:
        trainer.resume(args.resume)
    trainer.fit()
    return 0


def _build_model(config: RunConfig, checkpoint: str):
    from data_loader.schemas import get_schema
    from model.detector import Detector
    from training.checkpoint import load_checkpoint
    import torch

    schema = get_schema(config.data.dataset, config.data.schema_file)
    model = Detector(schema.num_classes, config.model).to(torch.device(config.train.device))
    load_checkpoint(checkpoint, model)
    return schema, model


def cmd_eval(args: argparse.Namespace) -> int:
    from training.inference import evaluate_model, write_report
    from training.trainer import load_split

    config = _load(args)
    schema, model = _build_model(config, args.ckpt)
    loaded = load_split(config, schema, args.split)
    report = evaluate_model(model, loaded, schema, config)
    path = write_report(report, os.path.join(config.train.output_dir, "reports"), f"eval_{args.split}")
    logger.info(f"Report scritto in {path}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    from data_loader.coco_io import load_coco
    from training.inference import infer, list_images

    config = _load(args)
    schema, model = _build_model(config, args.ckpt)
    threshold = config.train.score_threshold if args.threshold is None else args.threshold
    ground_truth = None
    if args.gt:
        loaded = load_coco(args.gt, image_root=args.images, schema=schema, check_files=False)
        ground_truth = {img.file_name: img for img in loaded.images}
    paths = list_images(args.images)
    if not paths:
        logger.warning(f"Nessuna immagine trovata in {args.images}")
    out_dir = os.path.join(config.train.output_dir, "overlays")
    infer(model, paths, schema.classes, config, out_dir, threshold, ground_truth)
    return 0


def cmd_make_synth(args: argparse.Namespace) -> int:
    from data_loader.synthetic import make_synthetic

    setup_logging(os.path.join(args.out, "make_synth.log"))
    make_synthetic(args.out, seed=args.seed, n_images=args.n, classes=args.classes)
    return 0


def cmd_convert_labelme(args: argparse.Namespace) -> int:
    from data_loader.labelme import convert_labelme, write_rejects
    from data_loader.schemas import get_schema

    setup_logging()
    schema = get_schema(args.schema, args.schema_file)
    coco, rejects = convert_labelme(args.input, schema)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as f:
        json.dump(coco, f, indent=2)
    rejects_path = os.path.splitext(args.out)[0] + ".rejects.json"
    write_rejects(rejects, rejects_path)
    logger.info(f"Annotazioni scritte in {args.out}, {len(rejects)} scarti in {rejects_path}")
    return 0


def cmd_dashboard(args: argparse.Namespace) -> int:
    """Avvia la dashboard Streamlit in un processo separato"""
    setup_logging()
    env = dict(os.environ, LEUKODET_DB=args.db)
    process = subprocess.Popen(
        [sys.executable, "-m", "streamlit", "run", "dashboard/app.py", "--server.port", str(args.port)],
        env=env,
    )
    logger.info(f"Dashboard avviata su http://localhost:{args.port}")
    return process.wait()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leukodet", description="Rilevamento di leucociti con transformer deformabile")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default="config.yaml", help="File di configurazione YAML")
        p.add_argument("--set", action="append", metavar="CHIAVE=VALORE", help="Sostituisce un valore della configurazione")

    p = sub.add_parser("train", help="Addestra il modello")
    add_config(p)
    p.add_argument("--resume", help="Checkpoint da cui riprendere")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Valuta un checkpoint")
    add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="Rileva le cellule su una cartella di immagini")
    add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--gt", help="Annotazioni COCO opzionali da disegnare in nero")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("make-synth", help="Genera il dataset sintetico")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--out", default="./data/synthetic")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("convert-labelme", help="Converte annotazioni LabelMe in COCO")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default="wbcdd")
    p.add_argument("--schema-file", default=None)
    p.set_defaults(func=cmd_convert_labelme)

    p = sub.add_parser("dashboard", help="Avvia il monitor dell'addestramento")
    p.add_argument("--db", default="./runs/metrics.db")
    p.add_argument("--port", type=int, default=8501)
    p.set_defaults(func=cmd_dashboard)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Funzione principale"""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        logger.info("Interruzione manuale")
        return 1
    except DetectorError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    except Exception as e:
        logger.critical(f"Errore critico durante l'esecuzione: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
