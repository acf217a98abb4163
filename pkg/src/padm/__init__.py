"""Desk-scale attenuation correction for emission tomography slices.

A Brownian-bridge diffusion model translates non-attenuation-corrected
reconstructions into attenuation-corrected ones.  The denoiser carries an
explicit physics head that predicts per-angle path lengths and an attenuation
map, from which a Chang-style correction factor is assembled inside the
network.  A teacher conditioned on the attenuation map is distilled into a
student that sees only the uncorrected image.

Subpackage map:

* ``phantom``   synthetic emission / attenuation slice generator
* ``projector`` parallel-beam attenuated projector, MLEM, reference ACF
* ``bridge``    bridge schedule, forward corruption, reverse sampler
* ``gradkit``   minimal reverse-mode autodiff kernel on numpy arrays
* ``model``     conditioners, denoiser trunk, physics head, distillation loss
* ``trainer``   teacher training and student distillation loops
* ``harness``   tensor file format, metrics, preprocessing, CLI
"""

__version__ = "0.1.0"


class PadmError(Exception):
    """Base class for package-level failures."""


class ConfigMismatch(PadmError):
    """Checkpoint or dataset configuration conflicts with the requested run."""


class NonFiniteError(PadmError):
    """A tensor operation produced NaN or Inf."""
