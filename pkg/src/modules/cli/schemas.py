# src/modules/cli/schemas.py

from pathlib import Path

from pydantic import BaseModel


class InferResult(BaseModel):
    """单张图像的推理结果"""
    source: Path
    output: Path
    height: int
    width: int
    seconds: float

    def log_line(self) -> str:
        return f"{self.source.name}: {self.width}x{self.height} -> {self.output} ({self.seconds * 1000:.1f} ms)"
