# lfa-net/src/main.py

"""
LFA-Net 命令行入口

    lfa-net train --manifest data/drive.tsv --epochs 200
    lfa-net infer --checkpoint runs/<id>/final.lfan --input images/ --output masks/
"""

import logging
import sys

from pydantic import ValidationError

from src.core.config import settings
from src.core.errors import EXIT_USAGE, LfaError
from src.modules.cli.router import dispatch


def configure_logging() -> None:
    """普通日志写到 stdout，错误信息由 main() 单独写到 stderr"""
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
        stream=sys.stdout,
    )


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    try:
        return dispatch(argv)
    except SystemExit as exc:
        # argparse 的用法错误
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ValidationError as exc:
        print(f"配置错误: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LfaError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
