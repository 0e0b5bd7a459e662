"""Planning and control stack for time-optimal driving at the handling limits.

Modules: ``geometry`` (tracks, paths, G2 spirals), ``ggv`` (acceleration
envelopes), ``raceline`` (offline line and profile), ``velocity`` (online
forward-backward speed planning), ``control`` (Pure Pursuit and clothoid
trackers), ``msnn`` (model-structured steering network), ``sim`` (closed-loop
simulator) and ``bench`` (metrics, ablations, envelope expansion, CLI).
"""

__version__ = "0.1.0"
