"""Coordinate-free GUI grounding with an attention action head, candidate
clustering and verifier-based selection, on synthetic screens."""

from .actionhead import AttentionMap, Model, TrainConfig, attend, kl_loss, predict, self_attention, train
from .candidates import CandidateSet, SelectionConfig, build_candidates
from .evalharness import element_hit, evaluate, hit_at_k
from .geometry import NormBBox, PatchGrid, make_grid, patch_center_px, rasterize_bbox, target_from_mask
from .synthgui import GroundingRecord, encode, gen_dataset, gen_screen, gen_verifier_data
from .verifier import OracleScorer, crop_window, select, self_aggregate_score

__version__ = "0.1.0"
