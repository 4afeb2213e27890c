"""Feedback control for cooperative interference nulling in MISO interference channels.

Modules: ``quantizer`` (CSI quantization models), ``channel`` (correlated
fading and CSIT error), ``mdp`` (discretized feedback-control MDP and its
solvers), ``structure`` (numerical checks of policy structure), ``highmob``
(block-fading water-filling and rate allocation), ``netsim`` (network Monte
Carlo) and ``cli`` (experiment runner).
"""

__version__ = "0.1.0"
