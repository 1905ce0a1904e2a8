"""Neural waveform synthesis for music: source-filter and autoregressive vocoders on a numpy autodiff core."""

__version__ = "0.1.0"
