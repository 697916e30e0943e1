"""Forecast, blur and denoise: GP-blurred forecasts refined by a learned denoiser."""

__version__ = "0.1.0"
