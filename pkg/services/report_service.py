"""
Report writer: CSV and JSON artifacts with fixed column order, fixed float
precision and the resolved configuration embedded in every file
"""
import csv
import io
import json
import math
from json import encoder as json_encoder
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from config import settings, TOOL_NAME, TOOL_VERSION
from utils.logging_config import get_logger
from utils.validation import validate_output_dir

logger = get_logger(__name__)

def format_float(value: float, digits: int) -> str:
    """Fixed significant digits; integral values keep a trailing '.0'"""
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    text = format(value, f".{digits}g")
    if not any(ch in text for ch in ".en"):
        text += ".0"
    return text

def to_builtin(value: Any) -> Any:
    """numpy scalars and arrays to plain Python values"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")

class FixedDigitsEncoder(json.JSONEncoder):
    """JSON encoder writing floats with a fixed number of significant digits; non-finite floats become null"""

    def __init__(self, *args, digits: int = 17, **kwargs):
        super().__init__(*args, **kwargs)
        self.digits = digits

    def default(self, o):
        return to_builtin(o)

    def iterencode(self, o, _one_shot=False):
        # floatstr is only pluggable through the pure-Python encoder; pinned by the report tests
        markers = {} if self.check_circular else None
        string_encoder = json_encoder.encode_basestring_ascii if self.ensure_ascii else json_encoder.encode_basestring

        def floatstr(value):
            if not math.isfinite(value):
                return "null"
            return format_float(value, self.digits)

        return json_encoder._make_iterencode(
            markers, self.default, string_encoder, self.indent, floatstr,
            self.key_separator, self.item_separator, self.sort_keys,
            self.skipkeys, _one_shot
        )(o, 0)

class ReportWriter:
    """Writes run artifacts into one output directory"""

    def __init__(self, out_dir, manifest: Mapping[str, Any], float_digits: Optional[int] = None):
        self.out_dir = validate_output_dir(out_dir)
        self.digits = float_digits or settings.FLOAT_DIGITS
        self.manifest = {"tool": TOOL_NAME, "version": TOOL_VERSION, **manifest}
        self.written: List[Path] = []

    def _format_cell(self, value: Any) -> str:
        if value is None:
            return ""
        if isinstance(value, (bool, np.bool_)):
            return "true" if value else "false"
        if isinstance(value, (float, np.floating)):
            return format_float(float(value), self.digits)
        return str(value)

    def dumps_json(self, payload: Mapping[str, Any]) -> str:
        document = {"manifest": self.manifest, **payload}
        return json.dumps(document, cls=FixedDigitsEncoder, digits=self.digits, indent=2, sort_keys=True) + "\n"

    def write_json(self, name: str, payload: Mapping[str, Any]) -> Path:
        path = self.out_dir / name
        path.write_text(self.dumps_json(payload), encoding="utf-8")
        self.written.append(path)
        logger.debug(f"Wrote {path}")
        return path

    def write_csv(self, name: str, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> Path:
        """
        CSV with the manifest as leading '#' comment lines, then a header row
        in the given column order
        """
        buffer = io.StringIO()
        buffer.write(f"# tool={TOOL_NAME} version={TOOL_VERSION}\n")
        buffer.write("# manifest=" + json.dumps(self.manifest, cls=FixedDigitsEncoder, digits=self.digits, sort_keys=True) + "\n")
        writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n", extrasaction="raise")
        writer.writeheader()
        for row in rows:
            writer.writerow({col: self._format_cell(row.get(col)) for col in columns})

        path = self.out_dir / name
        path.write_text(buffer.getvalue(), encoding="utf-8")
        self.written.append(path)
        logger.debug(f"Wrote {path}")
        return path

    def write_report(
        self,
        stem: str,
        payload: Mapping[str, Any],
        rows: Sequence[Mapping[str, Any]],
        columns: Sequence[str],
        formats: Sequence[str]
    ) -> List[Path]:
        """Write ``stem``.csv and/or ``stem``.json depending on ``formats``"""
        paths = []
        if "csv" in formats:
            paths.append(self.write_csv(f"{stem}.csv", rows, columns))
        if "json" in formats:
            paths.append(self.write_json(f"{stem}.json", {**payload, "rows": list(rows)}))
        return paths

def get_report_writer(out_dir, manifest: Mapping[str, Any], float_digits: Optional[int] = None) -> ReportWriter:
    return ReportWriter(out_dir, manifest, float_digits)
