# src/modules/tensor_core/schemas.py

from pydantic import BaseModel, Field


class GradReport(BaseModel):
    """
    一次有限差分梯度校验的结果
    """
    op_name: str
    max_abs_error: float
    max_rel_error: float
    checked_count: int = Field(ge=1)
    # 落在激活拐点 / 最大值切换附近而被排除的坐标数
    skipped_count: int = 0
    tolerance: float
    passed: bool

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.op_name:<28} rel={self.max_rel_error:.2e} "
            f"abs={self.max_abs_error:.2e} checked={self.checked_count} skipped={self.skipped_count}"
        )
