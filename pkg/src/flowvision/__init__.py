"""Flow-interaction-graph detection of malicious network traffic.

The pipeline turns packet traces into a compact graph of short-flow groups and
long-flow histograms, then scores edges with an unsupervised clustering loss.
"""

from flowvision.config import Config
from flowvision.detect import DetectionVerdict, detect
from flowvision.flowtable import FlowKey, FlowRecord, FlowTable, FlowTableConfig
from flowvision.graph import InteractionGraph, build_graph
from flowvision.ingest import PacketBatch, PacketRecord, PerPacketFeature, featurize, read_csv, read_pcap
from flowvision.synth import gen_synthetic

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DetectionVerdict",
    "FlowKey",
    "FlowRecord",
    "FlowTable",
    "FlowTableConfig",
    "InteractionGraph",
    "PacketBatch",
    "PacketRecord",
    "PerPacketFeature",
    "build_graph",
    "detect",
    "featurize",
    "gen_synthetic",
    "read_csv",
    "read_pcap",
]
