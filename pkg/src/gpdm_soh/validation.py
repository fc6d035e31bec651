"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array


def check_matrix(Y, min_rows=1, name="Y"):
    """2-D finite float array with at least ``min_rows`` rows."""
    Y = check_array(Y, dtype=np.float64, ensure_2d=True, ensure_all_finite=True,
                    ensure_min_samples=min_rows, input_name=name)
    return np.array(Y, dtype=float)


def check_segments(segments, n_rows):
    """Normalise ``segments`` to a list of ``(start, stop)`` covering ``range(n_rows)`` in order."""
    if segments is None:
        return [(0, n_rows)]
    out = [(int(s), int(e)) for s, e in segments]
    pos = 0
    for s, e in out:
        if s != pos or e <= s:
            raise ValueError(f"segments must tile the rows in order; got {(s, e)} at row {pos}")
        pos = e
    if pos != n_rows:
        raise ValueError(f"segments cover {pos} rows but the data has {n_rows}")
    return out
