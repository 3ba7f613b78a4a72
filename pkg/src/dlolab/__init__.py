"""World-model toolkit for deformable linear objects.

Rope simulation, quaternionic chain encoding, a small reverse-mode autodiff
engine, a recurrent state space model trained on top of it, and open-loop
evaluation by position error and Gauss-code topology.
"""

__version__ = "0.1.0"
