"""Speech enhancement by policy-gradient optimization of a mask network
against black-box sound-quality scores."""

from .dsp import MelFilterbank, Spectrogram, Waveform, istft, make_mel_filterbank, stft
from .masks import PostProcessConfig, apply_mask, compute_irm, compute_psa, postprocess_mask
from .nn import NetworkDims, NetworkParams, TrainHyper, forward, init_params, load_checkpoint, save_checkpoint
from .policy import PGConfig, baseline_subtract, pg_update_step, sample_output_candidates
from .scorers import ScoreRequest, make_scorer

__version__ = "0.1.0"
