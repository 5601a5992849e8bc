"""Target-free MRI harmonization over an explicit style manifold."""
