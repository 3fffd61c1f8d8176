"""Neural implicit RGB-D SLAM building blocks on a numpy reverse-mode tape.

Modules: ``autodiff`` (tape, Adam), ``encodings`` and ``model`` (scene
representations), ``rendering`` (weight functions), ``objective`` (losses),
``pipeline`` (sampling, tracking, mapping), ``evaluation`` (metrics, meshes),
``data`` (synthetic scenes and sequence I/O), ``bench`` (leaderboard CLI),
``gradcheck`` and ``experiments`` (scaled-down verification protocols).
"""

__version__ = "0.1.0"
