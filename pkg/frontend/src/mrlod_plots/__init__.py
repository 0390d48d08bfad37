"""Figure generation for experiment CSV outputs."""

from .render import FigureSpec, RenderError, render

__version__ = "0.1.0"
