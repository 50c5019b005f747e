"""Detection metrics, domain-shift diagnostics, complexity accounting, projection.

Model-dependent diagnostics live in :mod:`imtda.evaluation.diagnostics`.
"""

from .metrics import (AP_PROTOCOL, EvalReport, average_precision, evaluate_detections,
                      iou, iou_matrix)

__all__ = ["AP_PROTOCOL", "EvalReport", "average_precision", "evaluate_detections",
           "iou", "iou_matrix"]
