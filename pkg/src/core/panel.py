"""
Panel data model and ingestion.

A panel holds one treated unit and N-1 control units observed on a common
time grid, split at the intervention index t0 (number of pre-intervention
periods). Files come in two layouts:

    wide  first column is the unit label, header row holds time labels
    long  header ``unit,time,value``, one observation per row

Alignment re-indexes calendar-dated series around each unit's own
intervention date so that relative day 0 is the intervention for everyone.
"""
import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.core.exceptions import (
    BadT0Error,
    DegenerateScaleError,
    ConfigurationError,
    InsufficientHistoryError,
    MissingValueError,
    PanelFormatError,
    UnknownTreatedError,
    ValidationError,
)
from src.utils.logger import LoggerSetup


logger = LoggerSetup.get_logger(__name__)

LAYOUTS = ('wide', 'long')
NORMALIZATION_SCHEMES = ('none', 'treated_pre_max', 'zscore')
LONG_COLUMNS = ('unit', 'time', 'value')

_MISSING_TOKENS = {'', 'na', 'nan', 'n/a', 'null', 'none', 'inf', '+inf', '-inf',
                   'infinity', '+infinity', '-infinity'}

TimeLabel = Union[str, int]


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PanelData:
    """Treated unit plus control units on a shared time grid"""
    controls: np.ndarray
    treated: np.ndarray
    t0: int
    unit_labels: Tuple[str, ...]
    time_labels: Tuple[TimeLabel, ...]

    def __post_init__(self):
        controls = np.asarray(self.controls, dtype=float)
        treated = np.asarray(self.treated, dtype=float)

        if controls.ndim != 2:
            raise PanelFormatError(f"Controls must be a matrix, got shape {controls.shape}")
        if treated.ndim != 1:
            raise PanelFormatError(f"Treated series must be a vector, got shape {treated.shape}")
        if controls.shape[0] < 1:
            raise PanelFormatError("Panel needs at least one control unit")
        if controls.shape[1] != treated.shape[0]:
            raise PanelFormatError(
                f"Controls have {controls.shape[1]} periods, treated has {treated.shape[0]}"
            )
        if len(self.unit_labels) != controls.shape[0] + 1:
            raise PanelFormatError(
                f"Expected {controls.shape[0] + 1} unit labels, got {len(self.unit_labels)}"
            )
        if len(self.time_labels) != treated.shape[0]:
            raise PanelFormatError(
                f"Expected {treated.shape[0]} time labels, got {len(self.time_labels)}"
            )
        if not (np.all(np.isfinite(controls)) and np.all(np.isfinite(treated))):
            raise MissingValueError("Panel contains non-finite values")

        t_total = treated.shape[0]
        if isinstance(self.t0, bool) or int(self.t0) != self.t0 or not 1 <= self.t0 < t_total:
            raise BadT0Error(f"t0={self.t0} outside [1, {t_total - 1}] for T={t_total}")

        object.__setattr__(self, 'controls', _frozen(controls))
        object.__setattr__(self, 'treated', _frozen(treated))
        object.__setattr__(self, 't0', int(self.t0))
        object.__setattr__(self, 'unit_labels', tuple(str(u) for u in self.unit_labels))
        object.__setattr__(self, 'time_labels', tuple(self.time_labels))

    @property
    def n_units(self) -> int:
        return self.controls.shape[0] + 1

    @property
    def n_controls(self) -> int:
        return self.controls.shape[0]

    @property
    def t_total(self) -> int:
        return self.treated.shape[0]

    @property
    def treated_label(self) -> str:
        return self.unit_labels[0]

    @property
    def control_labels(self) -> Tuple[str, ...]:
        return self.unit_labels[1:]

    @property
    def scale(self) -> float:
        """Largest absolute pre-intervention treated value"""
        return float(np.max(np.abs(self.treated[:self.t0])))

    def with_treated(self, control_index: int) -> 'PanelData':
        """Placebo panel: control `control_index` becomes treated, true treated dropped"""
        if not 0 <= control_index < self.n_controls:
            raise ValidationError(f"Control index {control_index} out of range")
        keep = [i for i in range(self.n_controls) if i != control_index]
        if not keep:
            raise ValidationError("Placebo panel would have no controls")
        return PanelData(
            controls=self.controls[keep],
            treated=self.controls[control_index],
            t0=self.t0,
            unit_labels=(self.control_labels[control_index],)
            + tuple(self.control_labels[i] for i in keep),
            time_labels=self.time_labels,
        )

    def select_controls(self, labels: Iterable[str]) -> 'PanelData':
        """Restrict the donor pool to `labels` (in the given order)"""
        labels = list(labels)
        if not labels or len(set(labels)) != len(labels):
            raise ValidationError("Donor pool must list each control once and not be empty")
        index = {label: i for i, label in enumerate(self.control_labels)}
        unknown = [label for label in labels if label not in index]
        if unknown:
            raise ValidationError(f"Unknown control units: {', '.join(unknown)}")
        rows = [index[label] for label in labels]
        return PanelData(
            controls=self.controls[rows],
            treated=self.treated,
            t0=self.t0,
            unit_labels=(self.treated_label,) + tuple(labels),
            time_labels=self.time_labels,
        )

    def with_values(self, controls: np.ndarray, treated: np.ndarray) -> 'PanelData':
        """Same labels and t0, new values"""
        return PanelData(controls, treated, self.t0, self.unit_labels, self.time_labels)

    def restrict(self, n_periods: int, t0: int) -> 'PanelData':
        """Keep the first `n_periods` columns with a new intervention index"""
        return PanelData(
            controls=self.controls[:, :n_periods],
            treated=self.treated[:n_periods],
            t0=t0,
            unit_labels=self.unit_labels,
            time_labels=self.time_labels[:n_periods],
        )

    def equals(self, other: 'PanelData') -> bool:
        """Bitwise equality of values, labels and t0"""
        return (
            self.t0 == other.t0
            and self.unit_labels == other.unit_labels
            and self.time_labels == other.time_labels
            and np.array_equal(self.controls, other.controls)
            and np.array_equal(self.treated, other.treated)
        )

    def describe(self) -> Dict[str, int]:
        return {'n_units': self.n_units, 't_total': self.t_total, 't0': self.t0}


@dataclass(frozen=True)
class AlignmentSpec:
    """Calendar-dated series plus each unit's intervention date"""
    intervention_dates: Dict[str, date]
    series: Dict[str, pd.Series]
    treated_label: str

    def __post_init__(self):
        if self.treated_label not in self.series:
            raise UnknownTreatedError(f"Treated unit '{self.treated_label}' not in series")

        for unit, values in self.series.items():
            if unit not in self.intervention_dates:
                raise MissingValueError(f"No intervention date for unit '{unit}'")
            if len(values) == 0:
                raise InsufficientHistoryError(unit, f"Unit '{unit}' has no observations")
            anchor = pd.Timestamp(self.intervention_dates[unit])
            if not values.index.min() <= anchor <= values.index.max():
                raise InsufficientHistoryError(
                    unit, f"Intervention date {anchor.date()} of unit '{unit}' "
                          f"outside observed range"
                )

    @property
    def units(self) -> List[str]:
        """Treated first, then the rest in insertion order"""
        return [self.treated_label] + [u for u in self.series if u != self.treated_label]


@dataclass(frozen=True)
class NormalizationRecord:
    """Affine transform x -> (x - shift) / scale applied to every series"""
    scheme: str
    shift: float = 0.0
    scale: float = 1.0

    def apply(self, values):
        if self.scheme == 'none':
            return np.array(values, dtype=float)
        return (np.asarray(values, dtype=float) - self.shift) / self.scale

    def invert(self, values):
        if self.scheme == 'none':
            return np.array(values, dtype=float)
        return np.asarray(values, dtype=float) * self.scale + self.shift

    def invert_width(self, widths):
        """Half-widths and other differences only rescale"""
        if self.scheme == 'none':
            return np.array(widths, dtype=float)
        return np.asarray(widths, dtype=float) * self.scale

    def denormalize(self, panel: PanelData) -> PanelData:
        return panel.with_values(self.invert(panel.controls), self.invert(panel.treated))

    def to_dict(self) -> Dict[str, Union[str, float]]:
        return {'scheme': self.scheme, 'shift': self.shift, 'scale': self.scale}


# ---------------------------------------------------------------------------
# Ingestion

def _coerce_time_labels(labels: Sequence[str]) -> Tuple[TimeLabel, ...]:
    stripped = [str(label).strip() for label in labels]
    try:
        as_int = [int(label) for label in stripped]
    except ValueError:
        return tuple(stripped)
    # "01" and "1" would collide as integers
    if [str(v) for v in as_int] != stripped:
        return tuple(stripped)
    return tuple(as_int)


def _parse_cell(raw, unit: str, time_label) -> float:
    text = '' if raw is None else str(raw).strip()
    if text.lower() in _MISSING_TOKENS:
        raise MissingValueError(f"Missing value for unit '{unit}' at time '{time_label}'")
    try:
        value = float(text)
    except ValueError:
        raise PanelFormatError(
            f"Cannot parse '{text}' for unit '{unit}' at time '{time_label}'"
        ) from None
    if not math.isfinite(value):
        raise MissingValueError(f"Non-finite value for unit '{unit}' at time '{time_label}'")
    return value


def _read_frame(path: Union[str, Path], delimiter: str, header: Optional[int] = 0) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Panel file not found: {path}")
    try:
        return pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False,
                           skipinitialspace=True, header=header)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise PanelFormatError(f"Cannot read {path}: {e}") from e


def _read_wide(frame: pd.DataFrame):
    # Read with header=None: pandas would rename a repeated header "1" to "1.1"
    if frame.shape[1] < 2:
        raise PanelFormatError("Wide layout needs a unit column and at least one time column")
    header = [str(label).strip() for label in frame.iloc[0, 1:]]
    body = frame.iloc[1:]
    units = [str(u).strip() for u in body.iloc[:, 0]]
    if len(set(units)) != len(units):
        raise PanelFormatError("Duplicate unit labels in wide file")
    if len(set(header)) != len(header):
        raise PanelFormatError("Duplicate time labels in wide file")
    time_labels = _coerce_time_labels(header)
    if len(set(time_labels)) != len(time_labels):
        raise PanelFormatError("Duplicate time labels in wide file")

    values = np.array([
        [_parse_cell(cell, unit, t) for cell, t in zip(row, time_labels)]
        for unit, row in zip(units, body.iloc[:, 1:].itertuples(index=False, name=None))
    ], dtype=float)
    return units, time_labels, values


def _read_long(frame: pd.DataFrame):
    frame = frame.rename(columns=lambda c: str(c).strip().lower())
    missing = [c for c in LONG_COLUMNS if c not in frame.columns]
    if missing:
        raise PanelFormatError(f"Long layout missing columns: {', '.join(missing)}")
    frame = frame.assign(unit=frame['unit'].str.strip(), time=frame['time'].str.strip())

    duplicated = frame.duplicated(['unit', 'time'])
    if duplicated.any():
        row = frame[duplicated].iloc[0]
        raise PanelFormatError(f"Duplicate observation for unit '{row.unit}' at time '{row.time}'")

    units = list(pd.unique(frame['unit']))
    raw_times = list(pd.unique(frame['time']))
    grid = frame.pivot(index='unit', columns='time', values='value').reindex(
        index=units, columns=raw_times
    )
    time_labels = _coerce_time_labels(raw_times)

    values = np.empty(grid.shape, dtype=float)
    for i, unit in enumerate(units):
        for j, t in enumerate(time_labels):
            cell = grid.iat[i, j]
            values[i, j] = _parse_cell(None if pd.isna(cell) else cell, unit, t)
    return units, time_labels, values


def build_panel(units: Sequence[str], time_labels: Sequence[TimeLabel], values: np.ndarray,
                treated_label: str, t0: int) -> PanelData:
    """Assemble a PanelData from a unit-by-time matrix"""
    units = [str(u) for u in units]
    if treated_label not in units:
        raise UnknownTreatedError(f"Treated unit '{treated_label}' not found")
    if len(units) < 2:
        raise PanelFormatError("Panel needs a treated unit and at least one control")
    t_total = len(time_labels)
    if isinstance(t0, bool) or not isinstance(t0, (int, np.integer)) or not 1 <= t0 < t_total:
        raise BadT0Error(f"t0={t0} outside [1, {t_total - 1}] for T={t_total}")

    idx = units.index(treated_label)
    control_rows = [i for i in range(len(units)) if i != idx]
    return PanelData(
        controls=values[control_rows],
        treated=values[idx],
        t0=int(t0),
        unit_labels=(treated_label,) + tuple(units[i] for i in control_rows),
        time_labels=tuple(time_labels),
    )


def load_panel(path: Union[str, Path], layout: str, treated_label: str, t0: int,
               delimiter: str = ',') -> PanelData:
    """Read a wide or long panel file"""
    if layout not in LAYOUTS:
        raise ConfigurationError(f"Unknown layout '{layout}', expected one of {LAYOUTS}")

    if layout == 'wide':
        units, time_labels, values = _read_wide(_read_frame(path, delimiter, header=None))
    else:
        units, time_labels, values = _read_long(_read_frame(path, delimiter))

    panel = build_panel(units, time_labels, values, treated_label, t0)
    logger.debug(f"Loaded {layout} panel from {path}", extra=panel.describe())
    return panel


def panel_rows(panel: PanelData, layout: str) -> List[List[str]]:
    """Header plus data rows for writing; floats use shortest round-trip repr"""
    labels = [str(t) for t in panel.time_labels]
    matrix = np.vstack([panel.treated[None, :], panel.controls])

    if layout == 'wide':
        rows = [['unit'] + labels]
        for unit, values in zip(panel.unit_labels, matrix):
            rows.append([unit] + [repr(float(v)) for v in values])
        return rows
    if layout == 'long':
        rows = [list(LONG_COLUMNS)]
        for unit, values in zip(panel.unit_labels, matrix):
            rows.extend([unit, t, repr(float(v))] for t, v in zip(labels, values))
        return rows
    raise ConfigurationError(f"Unknown layout '{layout}', expected one of {LAYOUTS}")


def save_panel(panel: PanelData, path: Union[str, Path], layout: str = 'wide',
               delimiter: str = ',') -> Path:
    """Write `panel` so that load_panel reads it back exactly"""
    from src.utils.reporter import atomic_write

    rows = panel_rows(panel, layout)

    def _write(handle):
        writer = csv.writer(handle, delimiter=delimiter, lineterminator='\n')
        writer.writerows(rows)

    return atomic_write(path, _write)


# ---------------------------------------------------------------------------
# Alignment and smoothing

def load_alignment_spec(series_path: Union[str, Path], dates_path: Union[str, Path],
                        treated_label: str, delimiter: str = ',') -> AlignmentSpec:
    """Read a long ``unit,time,value`` file with ISO dates plus ``unit,intervention_date``"""
    frame = _read_frame(series_path, delimiter)
    frame = frame.rename(columns=lambda c: str(c).strip().lower())
    missing = [c for c in LONG_COLUMNS if c not in frame.columns]
    if missing:
        raise PanelFormatError(f"Series file missing columns: {', '.join(missing)}")
    frame = frame.assign(unit=frame['unit'].str.strip())

    try:
        frame['date'] = pd.to_datetime(frame['time'].str.strip(), format='%Y-%m-%d')
    except (ValueError, TypeError) as e:
        raise PanelFormatError(f"Series dates must be ISO-8601 (YYYY-MM-DD): {e}") from e
    if frame.duplicated(['unit', 'date']).any():
        raise PanelFormatError("Duplicate (unit, date) observations in series file")

    dates_frame = _read_frame(dates_path, delimiter)
    dates_frame = dates_frame.rename(columns=lambda c: str(c).strip().lower())
    if not {'unit', 'intervention_date'}.issubset(dates_frame.columns):
        raise PanelFormatError("Dates file needs columns unit,intervention_date")
    try:
        parsed = pd.to_datetime(dates_frame['intervention_date'].str.strip(), format='%Y-%m-%d')
    except (ValueError, TypeError) as e:
        raise PanelFormatError(f"Intervention dates must be ISO-8601 (YYYY-MM-DD): {e}") from e
    dates = {
        str(unit).strip(): ts.date()
        for unit, ts in zip(dates_frame['unit'], parsed)
    }

    series: Dict[str, pd.Series] = {}
    for unit in pd.unique(frame['unit']):
        rows = frame[frame['unit'] == unit].sort_values('date')
        values = [_parse_cell(v, unit, d.date()) for v, d in zip(rows['value'], rows['date'])]
        series[unit] = pd.Series(values, index=pd.DatetimeIndex(rows['date']), dtype=float)

    return AlignmentSpec(intervention_dates=dates, series=series, treated_label=treated_label)


def align_by_intervention(spec: AlignmentSpec, window: Tuple[int, int]) -> PanelData:
    """Re-index every unit to day offsets [-pre_days, post_days-1] around its own intervention"""
    pre_days, post_days = (int(w) for w in window)
    if pre_days < 1 or post_days < 1:
        raise BadT0Error(f"Alignment window needs pre_days >= 1 and post_days >= 1, got {window}")

    rows = []
    for unit in spec.units:
        values = spec.series[unit]
        anchor = pd.Timestamp(spec.intervention_dates[unit])
        start = anchor - timedelta(days=pre_days)
        end = anchor + timedelta(days=post_days - 1)

        if values.index.min() > start or values.index.max() < end:
            raise InsufficientHistoryError(
                unit,
                f"Unit '{unit}' needs data from {start.date()} to {end.date()} "
                f"(observed {values.index.min().date()} to {values.index.max().date()})"
            )

        window_values = values.reindex(pd.date_range(start, end, freq='D'))
        gaps = window_values.index[window_values.isna()]
        if len(gaps):
            raise MissingValueError(f"Unit '{unit}' has no observation on {gaps[0].date()}")
        rows.append(window_values.to_numpy(dtype=float))

    panel = PanelData(
        controls=np.vstack(rows[1:]),
        treated=rows[0],
        t0=pre_days,
        unit_labels=tuple(spec.units),
        time_labels=tuple(range(-pre_days, post_days)),
    )
    logger.info(f"Aligned {panel.n_units} units around their intervention dates",
                extra=panel.describe())
    return panel


def moving_average(series, window: int) -> np.ndarray:
    """Trailing mean over the last `window` observations (shorter at the start)"""
    if window < 1:
        raise ValidationError(f"Moving-average window must be >= 1, got {window}")
    values = np.asarray(series, dtype=float)
    if window == 1:
        return values.copy()
    return pd.Series(values).rolling(window, min_periods=1).mean().to_numpy()


def daily_increments(cumulative) -> np.ndarray:
    """Day-over-day new counts from cumulative counts; downward corrections clip to zero.

    The first observation has no previous day, so the result is one shorter
    than the input.
    """
    values = np.asarray(cumulative, dtype=float)
    return np.clip(np.diff(values), 0.0, None)


def preprocess_alignment(spec: AlignmentSpec, increments: bool = True,
                         smoothing_window: int = 7) -> AlignmentSpec:
    """Convert cumulative counts to daily counts and smooth, per unit, on the full calendar"""
    series = {}
    for unit, values in spec.series.items():
        data = values.to_numpy(dtype=float)
        index = values.index
        if increments:
            data = daily_increments(data)
            index = index[1:]
        data = moving_average(data, smoothing_window)
        series[unit] = pd.Series(data, index=index)
    return AlignmentSpec(spec.intervention_dates, series, spec.treated_label)


# ---------------------------------------------------------------------------
# Splitting and normalization

def split(panel: PanelData) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise partition at t0: (S_pre, S_post, s1_pre, s1_post)"""
    t0 = panel.t0
    return (
        panel.controls[:, :t0].copy(),
        panel.controls[:, t0:].copy(),
        panel.treated[:t0].copy(),
        panel.treated[t0:].copy(),
    )


def normalize(panel: PanelData, scheme: str = 'none') -> Tuple[PanelData, NormalizationRecord]:
    """Rescale the whole panel by one affine transform"""
    if scheme not in NORMALIZATION_SCHEMES:
        raise ConfigurationError(
            f"Unknown normalization scheme '{scheme}', expected one of {NORMALIZATION_SCHEMES}"
        )

    if scheme == 'none':
        return panel, NormalizationRecord('none')

    if scheme == 'treated_pre_max':
        scale = panel.scale
        if scale == 0.0:
            raise DegenerateScaleError("Treated pre-period is identically zero")
        record = NormalizationRecord(scheme, shift=0.0, scale=scale)
    else:
        pooled = np.concatenate([panel.controls[:, :panel.t0].ravel(), panel.treated[:panel.t0]])
        std = float(np.std(pooled))
        if std == 0.0:
            raise DegenerateScaleError("Pre-period values have zero spread")
        record = NormalizationRecord(scheme, shift=float(np.mean(pooled)), scale=std)

    return panel.with_values(record.apply(panel.controls), record.apply(panel.treated)), record
