"""Core event processing, attention, networks and simulation."""
