"""Radio-map-embedded CSI tracking and blind radio-map construction."""
