"""Workload generators: the T0/T1 grid activities and the PROOF cluster."""
