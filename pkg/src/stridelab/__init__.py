"""Perceptive, gait-adaptive planar biped locomotion at desk scale.

Subpackages cover the numeric core (nets), procedural terrain, the planar
biped simulator, observation assembly, height-strip perception, the unified
gait policy, reward shaping, the successive teacher-student PPO trainer,
and the command-line / serve entry points.
"""

__version__ = "0.1.0"
