"""Training-free timbre editing in a synthetic latent-diffusion world."""

from .bench import evaluate_edit, frechet_gaussian, onset_f1, dpd_analog, paired_bootstrap, run_grid, comparison_grid
from .edits import EditConfig, TimbreEditor, run_edit
from .mi import ChannelMask, MutualInfoChannelSelector, analyze, build_mask
from .probe import LogisticProbe, make_swapped, select_f_par, train_probe
from .schedule import CLEAN, build_schedule, step_for_fraction, to_ddim
from .world import LatentClip, MixtureDenoiser, WorldSpec, make_world, sample_clip, sample_frames

__all__ = [
    "CLEAN",
    "ChannelMask",
    "EditConfig",
    "LatentClip",
    "LogisticProbe",
    "MixtureDenoiser",
    "MutualInfoChannelSelector",
    "TimbreEditor",
    "WorldSpec",
    "analyze",
    "build_mask",
    "build_schedule",
    "dpd_analog",
    "evaluate_edit",
    "frechet_gaussian",
    "make_swapped",
    "make_world",
    "onset_f1",
    "paired_bootstrap",
    "run_edit",
    "run_grid",
    "sample_clip",
    "sample_frames",
    "select_f_par",
    "step_for_fraction",
    "comparison_grid",
    "to_ddim",
    "train_probe",
]

__version__ = "0.1.0"
