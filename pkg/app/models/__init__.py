"""Typed domain records shared by services, engine and commands."""

from app.models.dataset import (
    DatasetEntry,
    DatasetManifest,
    DatasetPlan,
    EvaluationRecord,
    EvaluationReport,
    PatchDataset,
    SlideGrade,
)
from app.models.fits import BfgsReport, GmmModel, KMeansResult
from app.models.network import ConvBlock, Network, NetworkConfig, TrainConfig
from app.models.nuclei import NucleiGraph, NucleusRecord
from app.models.patterns import CribriformRegion, LumenCandidate, NucleoliFlag, TumorSubgraph
from app.models.slide import (
    LevelInfo,
    OverlayRegion,
    Patch,
    SlideManifest,
    SlidePackage,
    StainRecord,
    TissueMask,
)
from app.models.stain import EnergyReport, StainModel
from app.models.synth import (
    CribriformTruth,
    GroundTruth,
    GroundTruthRecord,
    LumenTruth,
    NucleusTruth,
    SynthSpec,
)

__all__ = [
    "BfgsReport",
    "ConvBlock",
    "CribriformRegion",
    "CribriformTruth",
    "DatasetEntry",
    "DatasetManifest",
    "DatasetPlan",
    "EnergyReport",
    "EvaluationRecord",
    "EvaluationReport",
    "GmmModel",
    "GroundTruth",
    "GroundTruthRecord",
    "KMeansResult",
    "LevelInfo",
    "LumenCandidate",
    "LumenTruth",
    "Network",
    "NetworkConfig",
    "NucleiGraph",
    "NucleoliFlag",
    "NucleusRecord",
    "NucleusTruth",
    "OverlayRegion",
    "Patch",
    "PatchDataset",
    "SlideGrade",
    "SlideManifest",
    "SlidePackage",
    "StainModel",
    "StainRecord",
    "SynthSpec",
    "TissueMask",
    "TrainConfig",
    "TumorSubgraph",
]
