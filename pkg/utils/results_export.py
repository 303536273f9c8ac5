"""
Results export utility for simcache-lab
Writes command outputs as JSON, CSV or XLSX with a reproducibility block
"""
import json
import logging
import math
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import openpyxl
import pandas as pd
from openpyxl.utils.dataframe import dataframe_to_rows

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ResultsExporter:
    """Handles serializing and writing experiment results"""

    @staticmethod
    def serialize_value(value: Any, for_excel: bool = False) -> Any:
        """Convert numpy, enum and dataclass values to JSON-serializable form"""
        if isinstance(value, Enum):
            return value.value
        if is_dataclass(value) and not isinstance(value, type):
            return ResultsExporter.serialize_value(asdict(value), for_excel)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        if isinstance(value, (np.integer,)):
            return int(value)
        if isinstance(value, (np.floating, float)):
            value = float(value)
            return value if math.isfinite(value) else None
        if isinstance(value, np.bool_):
            return bool(value)
        if isinstance(value, dict):
            data = {str(k): ResultsExporter.serialize_value(v, for_excel) for k, v in value.items()}
            return json.dumps(data) if for_excel else data
        if isinstance(value, (list, tuple)):
            data = [ResultsExporter.serialize_value(v, for_excel) for v in value]
            return json.dumps(data) if for_excel else data
        return value

    @staticmethod
    def to_json(payload: Any) -> str:
        return json.dumps(ResultsExporter.serialize_value(payload), indent=2, sort_keys=False)

    @staticmethod
    def write_json(payload: Any, path: Optional[PathLike]) -> str:
        """Write JSON to path, or just return it when path is None"""
        text = ResultsExporter.to_json(payload)
        if path is not None:
            Path(path).write_text(text + '\n')
            logger.info(f"Wrote JSON results to {path}")
        return text

    @staticmethod
    def rows_to_frame(rows: Sequence[Dict[str, Any]], columns: Optional[List[str]] = None,
                      for_excel: bool = False) -> pd.DataFrame:
        cleaned = [
            {k: ResultsExporter.serialize_value(v, for_excel=for_excel) for k, v in row.items()}
            for row in rows
        ]
        frame = pd.DataFrame(cleaned)
        if columns is not None:
            frame = frame.reindex(columns=columns)
        return frame

    @staticmethod
    def write_csv(rows: Sequence[Dict[str, Any]], path: PathLike,
                  columns: Optional[List[str]] = None) -> pd.DataFrame:
        frame = ResultsExporter.rows_to_frame(rows, columns)
        frame.to_csv(path, index=False)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return frame

    @staticmethod
    def write_xlsx(sheets: Dict[str, Sequence[Dict[str, Any]]], path: PathLike,
                   metadata: Optional[Dict[str, Any]] = None) -> None:
        """One worksheet per table plus a metadata sheet, with bold headers"""
        workbook = openpyxl.Workbook()
        workbook.remove(workbook.active)

        if metadata:
            metadata_sheet = workbook.create_sheet('Metadata')
            metadata_sheet['A1'] = 'Run Information'
            metadata_sheet['A1'].font = openpyxl.styles.Font(bold=True)
            row = 3
            for key, value in metadata.items():
                metadata_sheet[f'A{row}'] = str(key).replace('_', ' ').title()
                metadata_sheet[f'B{row}'] = json.dumps(ResultsExporter.serialize_value(value))
                row += 1

        for name, rows in sheets.items():
            frame = ResultsExporter.rows_to_frame(rows, for_excel=True)
            # Excel sheet names are capped at 31 characters
            worksheet = workbook.create_sheet(name[:31])
            for values in dataframe_to_rows(frame, index=False, header=True):
                worksheet.append(values)
            for column in worksheet.columns:
                width = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column)
                worksheet.column_dimensions[column[0].column_letter].width = min(width + 2, 50)
            for cell in worksheet[1]:
                cell.font = openpyxl.styles.Font(bold=True)
                cell.fill = openpyxl.styles.PatternFill(start_color='CCCCCC', end_color='CCCCCC',
                                                        fill_type='solid')

        workbook.save(path)
        logger.info(f"Wrote workbook with {len(sheets)} sheets to {path}")
