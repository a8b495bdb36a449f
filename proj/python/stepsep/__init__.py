"""Multi-step refinement of one-step audio separation models.

Audio arrays are float64 numpy arrays shaped (channels, frames); 1-D input is
treated as mono.
"""

from ._stepsep import (
    AudioIoError,
    ExternalProcessError,
    MetricError,
    Model,
    RefinementError,
    ShapeError,
    bridge_point,
    bridge_score,
    contraction_model,
    csdr,
    ddbm_loss_equivalence,
    external_model,
    identity_model,
    load_wav,
    neg_mse,
    oracle_irm_model,
    ratio_grid,
    refine,
    save_wav,
    sdr,
    search_sdr,
    search_sdr_chunks,
    si_snr,
    simulate_error_bound,
    spectral_gate_model,
    usdr,
)
from ._stepsep import cli as _cli

__version__ = "0.1.0"


def cli(*args):
    """Run the command-line tool in-process. Returns (status, stdout, stderr)."""
    return _cli([str(a) for a in args])
