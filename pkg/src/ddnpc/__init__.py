"""Data-driven nonlinear predictive control for feedback linearizable systems.

Submodules:

* ``trajlib``  - sequences, Hankel matrices, persistency of excitation
* ``plant``    - ground-truth plants, window states, offline data collection
* ``basis``    - basis dictionaries and grid approximation certificates
* ``behavior`` - data-based representation, simulation and output matching
* ``solver``   - augmented-Lagrangian nonlinear programming
* ``npc``      - nominal and robust receding-horizon controllers
* ``cli``      - command-line entry point
"""

__version__ = "0.1.0"
