"""
Report export functionality
Metrics tables as CSV / JSON / Excel, method comparison tables,
loss/IoU curve charts and TP/FP/FN overlay images
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from openpyxl import Workbook  # noqa: E402
from openpyxl.styles import Alignment, Font, PatternFill  # noqa: E402
from openpyxl.utils import get_column_letter  # noqa: E402
from PIL import Image  # noqa: E402

from config.settings import Settings  # noqa: E402
from pidcount.errors import DatasetLoadError, DimensionError, ValidationError  # noqa: E402
from pidcount.metrics import METRIC_FIELDS, MetricsReport  # noqa: E402
from pidcount.trainer import TrainingCurves  # noqa: E402

logger = logging.getLogger(__name__)

ROW_FIELDS = ("id", "method", "accuracy", "dice", "jaccard", "precision", "counting_accuracy",
              "hausdorff_px", "hausdorff_flagged", "n_pred", "n_gt")
COMPARISON_FIELDS = ("method",) + METRIC_FIELDS + ("n_images",)

# overlay hues: agreement, prediction only, ground truth only
TP_COLOR = (0, 200, 0)
FP_COLOR = (230, 40, 40)
FN_COLOR = (40, 90, 255)
OVERLAY_ALPHA = 0.55


class ReportExporter:
    """Writes evaluation and training artifacts"""

    @staticmethod
    def _fill_sheet(ws, data: Sequence[Dict[str, Any]], headers: Sequence[str]):
        header_fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
        header_font = Font(bold=True, color="FFFFFF")

        for col_idx, header in enumerate(headers, start=1):
            cell = ws.cell(row=1, column=col_idx, value=header)
            cell.fill = header_fill
            cell.font = header_font
            cell.alignment = Alignment(horizontal="center", vertical="center")

        for row_idx, row_data in enumerate(data, start=2):
            for col_idx, header in enumerate(headers, start=1):
                value = row_data.get(header)
                ws.cell(row=row_idx, column=col_idx, value="" if value is None else value)

        for col_idx, header in enumerate(headers, start=1):
            column_letter = get_column_letter(col_idx)
            max_length = len(str(header))
            for row in ws[column_letter]:
                if row.value is not None:
                    max_length = max(max_length, len(str(row.value)))
            ws.column_dimensions[column_letter].width = min(max_length + 2, 50)

        ws.freeze_panes = "A2"

    @staticmethod
    def export_to_excel(sheets: Dict[str, Sequence[Dict[str, Any]]], headers: Dict[str, Sequence[str]],
                        filepath: Path) -> Path:
        """
        Write one styled worksheet per table

        Args:
            sheets: Sheet title -> rows (dictionaries)
            headers: Sheet title -> column order
            filepath: Destination .xlsx file

        Returns:
            Path to the created workbook
        """
        if not sheets:
            raise ValidationError("No data to export")
        wb = Workbook()
        wb.remove(wb.active)
        for title, rows in sheets.items():
            ReportExporter._fill_sheet(wb.create_sheet(title=title), rows, headers[title])
        filepath.parent.mkdir(parents=True, exist_ok=True)
        wb.save(filepath)
        return filepath

    @staticmethod
    def _write_csv(path: Path, rows: Sequence[Dict[str, Any]], headers: Sequence[str]) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(headers)
            for row in rows:
                writer.writerow(["" if row.get(h) is None else _cell(row.get(h)) for h in headers])
        return path

    @staticmethod
    def export_metrics(report: MetricsReport, directory: Path) -> Dict[str, Path]:
        """metrics.csv (per image), metrics.json (aggregate) and metrics.xlsx (both)"""
        directory = Path(directory)
        rows = [r.to_dict() for r in report.rows]
        aggregate = report.aggregate()

        csv_path = ReportExporter._write_csv(directory / Settings.METRICS_CSV_FILENAME, rows, ROW_FIELDS)
        json_path = directory / Settings.METRICS_JSON_FILENAME
        json_path.write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        xlsx_path = ReportExporter.export_to_excel(
            {"per_image": rows, "aggregate": [aggregate]},
            {"per_image": ROW_FIELDS, "aggregate": COMPARISON_FIELDS},
            directory / Settings.METRICS_XLSX_FILENAME,
        )
        logger.info(f"[OK] Metrics written to {directory} ({report.n_images} images)")
        return {"csv": csv_path, "json": json_path, "xlsx": xlsx_path}

    @staticmethod
    def load_aggregate(directory: Path) -> Dict[str, Any]:
        path = Path(directory) / Settings.METRICS_JSON_FILENAME
        if not path.exists():
            raise DatasetLoadError(f"No {Settings.METRICS_JSON_FILENAME} in {directory}")
        return json.loads(path.read_text(encoding="utf-8"))

    @staticmethod
    def export_comparison(aggregates: Sequence[Dict[str, Any]], directory: Path) -> Dict[str, Path]:
        """One row per method with the six aggregate metrics"""
        directory = Path(directory)
        base = Settings.COMPARISON_FILENAME
        csv_path = ReportExporter._write_csv(directory / f"{base}.csv", aggregates, COMPARISON_FIELDS)
        xlsx_path = ReportExporter.export_to_excel(
            {"comparison": aggregates}, {"comparison": COMPARISON_FIELDS}, directory / f"{base}.xlsx",
        )
        logger.info(f"[OK] Comparison of {len(aggregates)} methods written to {directory}")
        return {"csv": csv_path, "xlsx": xlsx_path}

    @staticmethod
    def plot_curves(curves: TrainingCurves, path: Path) -> Path:
        """IoU curves on top, loss curves below, both against the epoch"""
        if not len(curves):
            raise ValidationError("curves hold no epochs")
        epochs = np.arange(1, len(curves) + 1)
        fig, (ax_iou, ax_loss) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
        ax_iou.plot(epochs, curves.train_iou, label="train")
        ax_iou.plot(epochs, curves.val_iou, label="val")
        ax_iou.axvline(curves.best_epoch + 1, color="grey", linestyle=":", linewidth=1)
        ax_iou.set_ylabel("IoU")
        ax_iou.legend(loc="lower right")
        ax_loss.plot(epochs, curves.train_loss, label="train")
        ax_loss.plot(epochs, curves.val_loss, label="val")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(loc="upper right")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return path

    @staticmethod
    def render_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray,
                       path: Optional[Path] = None) -> np.ndarray:
        """
        Tint agreement, prediction-only and ground-truth-only pixels

        Args:
            image: (H, W) or (H, W, C) floats in [0, 1]
            gt: Binary ground truth
            pred: Binary prediction
            path: Optional PNG destination

        Returns:
            (H, W, 3) uint8 overlay
        """
        gt = np.asarray(gt).astype(bool)
        pred = np.asarray(pred).astype(bool)
        if gt.shape != pred.shape or np.asarray(image).shape[:2] != gt.shape:
            raise DimensionError(f"overlay inputs disagree: image {np.shape(image)}, gt {gt.shape}, pred {pred.shape}")
        base = np.asarray(image, dtype=np.float64)
        if base.ndim == 3 and base.shape[2] == 1:
            base = base[:, :, 0]
        if base.ndim == 2:
            base = np.repeat(base[:, :, None], 3, axis=2)
        canvas = np.clip(base, 0.0, 1.0) * 255.0
        for region, hue in ((gt & pred, TP_COLOR), (pred & ~gt, FP_COLOR), (gt & ~pred, FN_COLOR)):
            canvas[region] = (1.0 - OVERLAY_ALPHA) * canvas[region] + OVERLAY_ALPHA * np.array(hue, dtype=np.float64)
        overlay = np.round(canvas).astype(np.uint8)
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(overlay, mode="RGB").save(path)
        return overlay


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value
