"""Two-stage chest-CT triage: WNL vs disease, then PE vs other disease."""

__version__ = "0.1.0"
