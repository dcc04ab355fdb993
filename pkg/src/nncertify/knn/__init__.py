"""Exact 1-nearest-neighbor prediction, margins, certificates and minimal
adversarial perturbations."""

from .certify import (Certificate, certified_flags, certified_radii, certified_robust_accuracy,
                      certify, parse_norm)
from .exact import (ExactRA, attack_1nn_witness_stats, certificate_records, exact_robust_accuracy,
                    min_distances, robust_flags, witness_histogram)
from .geometry import (MinPerturbation, flips_within, min_adversarial_l2, min_adversarial_linf,
                       project_halfspaces_dykstra, project_halfspaces_ldp, segment_flip_bounds)
from .index import (Margin, Margins, NNIndex, build_index, class_distance, class_distance_pair,
                    margin, margins, predict)
from .surrogate import NNSurrogate
