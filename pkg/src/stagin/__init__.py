"""Spatio-temporal attention GIN for dynamic functional-connectivity graphs."""

from .fcgraph import DynamicGraph, RoiTimeseries, WindowConfig, build_dynamic_graph, standardize
from .model import AttentionRecord, ModelConfig, ModelState, forward, init_state

__version__ = "0.1.0"

__all__ = ["DynamicGraph", "RoiTimeseries", "WindowConfig", "build_dynamic_graph", "standardize",
           "AttentionRecord", "ModelConfig", "ModelState", "forward", "init_state"]
