"""Numerical toolkit for short simple geodesic loops on Riemannian 2-spheres.

Builds concrete sphere metrics, runs the base-point-fixing disk flow, maps
cut loci as finite trees, constructs monotone meridional slicings, and
extracts two distinct simple geodesic loops with diameter-relative length
bounds via min-max over the slicing families.
"""

__version__ = "0.1.0"

from .tensor import MetricSpec, NORTH, SOUTH
from .surface import (GeodesicSegment, Polyline, SurfacePoint, TangentVector,
                      connect_in_ball, distance, estimate_diameter, metric_at,
                      normal_ball_radius, shoot_geodesic)
from .curves import (DiscreteCurve, IntersectionReport, intersections,
                     is_p_admissible, length, resample)
from .diskflow import (BallCover, FlowResult, build_cover, decompose_loops,
                       flow_family, flow_step, flow_to_limit,
                       interpolate_polygon_edge, ray_decision, split_arcs)
from .cutlocus import (CutLocusTree, build_cut_locus, minimizing_geodesics_to,
                       vertex_count_inside)
from .slicing import (Digon, Homotopy, SlicingFamily, build_slicing,
                      contract_digon, find_berger_point, maeda_convert,
                      select_tau_geodesics)
from .minmax import (CycleFamily, MinMaxReport, build_cycle_u0,
                     build_cycle_u1, extract_two_loops, run_minmax)
