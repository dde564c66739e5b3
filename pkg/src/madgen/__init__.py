"""Two-stage molecule elucidation from MS/MS spectra.

Stage 1 retrieves a candidate scaffold for a spectrum by contrastive
ranking; stage 2 completes the molecule from the scaffold with an
endpoint-conditioned discrete Markov bridge guided by the spectrum.
"""

__version__ = "0.1.0"
