from .boxes import BoundingBox, compute_offset, iou, overlap_fraction
from .manifest import Manifest, ManifestError
from .patches import PairSample, crop_resize, make_pairs, pair_directed, pair_from_boxes, pair_random
from .proposals import Proposal, ProposalFormatError, apply_proposals, filter_proposals, ingest_proposals
from .synthetic import CLASSES, SyntheticConfig, check_constraints, gen_synthetic, shape_template

__all__ = [
    "BoundingBox", "compute_offset", "iou", "overlap_fraction",
    "Manifest", "ManifestError",
    "PairSample", "crop_resize", "make_pairs", "pair_directed", "pair_from_boxes", "pair_random",
    "Proposal", "ProposalFormatError", "apply_proposals", "filter_proposals", "ingest_proposals",
    "CLASSES", "SyntheticConfig", "check_constraints", "gen_synthetic", "shape_template",
]
