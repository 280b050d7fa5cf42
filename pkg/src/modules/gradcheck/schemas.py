# src/modules/gradcheck/schemas.py

from pydantic import BaseModel, Field

from src.modules.tensor_core.schemas import GradReport


class SuiteReport(BaseModel):
    """一次梯度校验套件运行的汇总"""
    reports: list[GradReport] = Field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failed_ops(self) -> list[str]:
        return [r.op_name for r in self.reports if not r.passed]

    def summary(self) -> str:
        lines = [r.summary() for r in self.reports]
        failed = self.failed_ops
        tail = "全部通过" if not failed else f"失败 {len(failed)} 项: {', '.join(failed)}"
        lines.append(f"共 {len(self.reports)} 项，{tail} ({self.elapsed_seconds:.1f}s)")
        return "\n".join(lines)
