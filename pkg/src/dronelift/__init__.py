"""Truck-plus-drone last-mile delivery simulator.

Core pieces: scenario loading and synthesis, turn-restricted routing with a
TSP solver, tandem delivery planning (on-site / en-route drone dispatch),
quadrotor and truck mobility with energy accounting, the fleet coordination
protocol, abstract LTE / C-V2X link models over deterministic obstacle
shadowing, and a discrete-event engine that binds them into reproducible
episodes and campaigns.
"""

__version__ = "0.1.0"
