"""Ingestion, preprocessing and splitting of interaction logs."""

from .ingest import DATASET_PRESETS, InteractionRecord, ingest
from .preprocess import dedup_earliest, iterative_filter
from .split import DatasetSplit, Event, Sample, gen_instances, split

__all__ = [
    "DATASET_PRESETS", "DatasetSplit", "Event", "InteractionRecord", "Sample",
    "dedup_earliest", "gen_instances", "ingest", "iterative_filter", "split",
]
