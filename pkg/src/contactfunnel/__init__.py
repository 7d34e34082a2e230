"""Feedback control for flipping a half-cylinder with a two-finger gripper.

Offline: plan a nominal trajectory (:mod:`.trajopt`), linearise each contact
mode along it (:mod:`.pwa`) and synthesise a funnel of zonotopes
(:mod:`.funnel`).  Online: track the plan with small LPs (:mod:`.controller`)
inside a disturbance-injecting simulator (:mod:`.harness`).
"""

__version__ = "0.1.0"
