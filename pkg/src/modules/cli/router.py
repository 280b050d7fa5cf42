# src/modules/cli/router.py

"""
命令行子命令：train / infer / eval / inspect / gradcheck / ablation-list

每个 cmd_* 接收解析好的 argparse.Namespace，返回进程退出码；
错误一律以 LfaError 抛出，由 src/main.py 统一转换为退出码。
"""

import argparse
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import ulid

from src.core.config import settings
from src.core.errors import EXIT_FAILURE, EXIT_OK, DataError, LfaIOError
from src.modules.data_io.checkpoint import load_checkpoint, load_training_state
from src.modules.data_io.service import (
    atomic_write_text,
    expand_with_augmentations,
    load_image,
    load_mask,
    load_samples,
    read_manifest,
    resize,
    resize_to,
    write_mask_png,
)
from src.modules.evalx.service import (
    confusion_counts,
    estimate_flops,
    format_complexity,
    format_metrics_table,
    metrics,
    metrics_csv_row,
)
from src.modules.gradcheck.service import run_suite
from src.modules.lfa_model.ablations import ablation_config, ablation_names
from src.modules.lfa_model.schemas import Model
from src.modules.lfa_model.service import build_model, model_forward
from src.modules.nn_layers.schemas import Mode
from src.modules.nn_layers.service import clamp_diagnostics
from src.modules.tensor_core.tensor import no_grad
from src.modules.training.schemas import TrainRunConfig
from src.modules.training.service import fit
from src.shared.profile import RunProfile, dump_profile, load_profile

from .schemas import InferResult

logger = logging.getLogger(__name__)

PROFILE_FILE_NAME = "profile.conf"
EVAL_CSV_HEADER = "image,dice,jaccard,sensitivity,specificity,accuracy"


# --- 公共工具 ---

def _log_clamp_counts() -> None:
    counts = ", ".join(f"{kind}={count}" for kind, count in clamp_diagnostics().items())
    logger.info(f"数值截断统计: {counts}")


def _profile(args: argparse.Namespace) -> RunProfile:
    """读取配置文件并套用命令行上的 --ablation"""
    path = args.config
    if path is None and settings.DEFAULT_PROFILE_PATH.is_file():
        path = settings.DEFAULT_PROFILE_PATH
    profile = load_profile(path)
    if getattr(args, "ablation", None):
        model = ablation_config(args.ablation, base=profile.model)
        profile = profile.model_copy(update={"ablation": args.ablation, "model": model})
    return profile


def _train_config(profile: RunProfile, args: argparse.Namespace) -> TrainRunConfig:
    overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "input_size": args.input_size,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "split_fraction": args.split_fraction,
        "checkpoint_every": args.checkpoint_every,
        "multiplicity": args.multiplicity,
    }
    if args.augment:
        overrides["augment"] = True
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return TrainRunConfig.model_validate({**profile.train.model_dump(), **overrides})


def _image_paths(source: Path) -> list[Path]:
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.suffix.lower() == ".png")
        if not paths:
            raise DataError(f"目录 {source} 下没有 PNG 图像")
        return paths
    if not source.is_file():
        raise LfaIOError(f"输入不存在: {source}")
    return [source]


# --- train ---

def cmd_train(args: argparse.Namespace) -> int:
    profile = _profile(args)
    run_cfg = _train_config(profile, args)

    manifest = read_manifest(args.manifest, split_seed=run_cfg.seed, split_fraction=run_cfg.split_fraction)
    train_entries, val_entries = manifest.split()
    if not train_entries:
        raise DataError(f"数据清单 {args.manifest} 切分后训练集为空")
    train = load_samples(train_entries, run_cfg.input_size)
    val = load_samples(val_entries, run_cfg.input_size)
    if run_cfg.multiplicity > 1:
        train = expand_with_augmentations(train, run_cfg.multiplicity, run_cfg.seed, profile.augment)

    optimizer = None
    if args.resume is not None:
        model, optimizer = load_training_state(args.resume)
        logger.info(f"从 {args.resume} 继续训练 (已完成 {optimizer.step if optimizer else 0} 步)")
    else:
        model = build_model(profile.model, run_cfg.seed)

    out_dir = args.out or settings.OUTPUT_DIR / str(ulid.new())
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / PROFILE_FILE_NAME, dump_profile(profile.model_copy(update={"train": run_cfg})))
    logger.info(
        f"开始训练: {model.config.describe()} | 训练 {len(train)} 张, 验证 {len(val)} 张, "
        f"{run_cfg.epochs} 个 epoch, 输出目录 {out_dir}"
    )

    history = fit(
        model, train, val, run_cfg, profile.loss, out_dir,
        optimizer=optimizer,
        augment_cfg=profile.augment,
        on_epoch=lambda stats: print(stats.log_line(), flush=True),
    )
    last = history[-1]
    logger.info(f"训练结束: loss={last.mean_loss:.4f} train_dice={last.train_dice:.4f}")
    _log_clamp_counts()
    return EXIT_OK


# --- infer ---

def _infer_one(model: Model, source: Path, out_dir: Path, input_size: int, threshold: float) -> InferResult:
    started = time.perf_counter()
    image = load_image(source)
    _, _, height, width = image.shape
    # 工作线程的上下文不继承 no_grad，需要在线程内重新进入
    with no_grad():
        probs = model_forward(resize(image, input_size), model, Mode.infer)
    output = out_dir / f"{source.stem}.png"
    write_mask_png(resize_to(probs, height, width), threshold, output)
    return InferResult(source=source, output=output, height=height, width=width, seconds=time.perf_counter() - started)


def cmd_infer(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    paths = _image_paths(args.input)
    args.output.mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=settings.INFER_WORKERS) as pool:
        results = list(pool.map(
            lambda p: _infer_one(model, p, args.output, args.input_size, args.threshold),
            paths,
        ))
    for result in results:
        print(result.log_line())
    total = sum(r.seconds for r in results)
    logger.info(f"推理完成: {len(results)} 张，平均 {total / len(results) * 1000:.1f} ms/张")
    _log_clamp_counts()
    return EXIT_OK


# --- eval ---

def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if not manifest.entries:
        raise DataError(f"数据清单 {args.manifest} 为空")

    rows = []
    total = None
    with no_grad():
        for entry in manifest.entries:
            image = resize(load_image(entry.image_path), args.input_size)
            mask = resize(load_mask(entry.mask_path), args.input_size, nearest=True)
            counts = confusion_counts(model_forward(image, model, Mode.infer), mask, args.threshold)
            total = counts if total is None else total + counts
            rows.append((entry.image_path.stem, metrics(counts)))
    rows.append(("ALL", metrics(total)))

    print(format_metrics_table(rows))
    if args.csv is not None:
        lines = [EVAL_CSV_HEADER, *(metrics_csv_row(label, report) for label, report in rows)]
        atomic_write_text(args.csv, "\n".join(lines) + "\n")
        logger.info(f"指标已写入 {args.csv}")
    _log_clamp_counts()
    return EXIT_OK


# --- inspect ---

def cmd_inspect(args: argparse.Namespace) -> int:
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_model(_profile(args).model, seed=0)
    report = estimate_flops(model, (1, model.config.in_channels, args.input_size, args.input_size))
    print(format_complexity(report, per_layer=args.per_layer))
    return EXIT_OK


# --- gradcheck ---

def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_suite(args.op, args.tolerance)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAILURE


# --- ablation-list ---

def cmd_ablation_list(args: argparse.Namespace) -> int:
    width = max(len(name) for name in ablation_names())
    for name in ablation_names():
        config = ablation_config(name)
        params = sum(t.size for t in build_model(config, seed=0).named_parameters().values())
        print(f"{name:<{width}}  {params / 1e6:.3f}M  {config.describe()}")
    return EXIT_OK


# --- 参数解析 ---

def _add_profile_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="实验配置文件 (默认 configs/lfa_net.conf)")
    parser.add_argument("--ablation", default=None, help="消融行名，见 ablation-list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfa-net", description="LFA-Net 视网膜血管分割")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="训练模型")
    _add_profile_flags(train)
    train.add_argument("--manifest", type=Path, required=True, help="数据清单 (图像<TAB>掩码)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--input-size", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--split-fraction", type=float)
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--multiplicity", type=int, help="每张训练图像离线扩增的副本数")
    train.add_argument("--augment", action="store_true", help="每个批次在线随机增强")
    train.add_argument("--resume", type=Path, help="从 checkpoint 继续训练")
    train.add_argument("--out", type=Path, help="输出目录 (默认 runs/<ULID>)")
    train.set_defaults(handler=cmd_train)

    infer = sub.add_parser("infer", help="对图像或目录推理，输出二值掩码 PNG")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("--input", type=Path, required=True, help="PNG 图像或包含 PNG 的目录")
    infer.add_argument("--output", type=Path, required=True, help="掩码输出目录")
    infer.add_argument("--threshold", type=float, default=settings.DEFAULT_THRESHOLD)
    infer.add_argument("--input-size", type=int, default=settings.DEFAULT_INPUT_SIZE)
    infer.set_defaults(handler=cmd_infer)

    evaluate = sub.add_parser("eval", help="在带标注的数据清单上计算分割指标")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--threshold", type=float, default=settings.DEFAULT_THRESHOLD)
    evaluate.add_argument("--input-size", type=int, default=settings.DEFAULT_INPUT_SIZE)
    evaluate.add_argument("--csv", type=Path, help="同时把逐图指标写入 CSV")
    evaluate.set_defaults(handler=cmd_eval)

    inspect = sub.add_parser("inspect", help="参数量 / FLOPs / 模型大小")
    _add_profile_flags(inspect)
    inspect.add_argument("--checkpoint", type=Path)
    inspect.add_argument("--input-size", type=int, default=settings.DEFAULT_INPUT_SIZE)
    inspect.add_argument("--per-layer", action="store_true", help="列出每层的参数量与 FLOPs")
    inspect.set_defaults(handler=cmd_inspect)

    gradcheck = sub.add_parser("gradcheck", help="运行有限差分梯度校验套件")
    gradcheck.add_argument("--op", help="只运行指定项，如 conv2d、litefusion、model")
    gradcheck.add_argument("--tolerance", type=float, help="覆盖默认相对误差阈值")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablations = sub.add_parser("ablation-list", help="列出全部消融配置")
    ablations.set_defaults(handler=cmd_ablation_list)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.handler(args)
