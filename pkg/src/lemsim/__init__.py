"""Two-tier local electricity market simulator.

A secondary market clears DCA flexibility bids per minute via lexicographic
multi-objective optimization; a primary market clears aggregated SMO bids
every five minutes via a second-order-cone-relaxed DistFlow OPF whose
nodal-balance duals are the distribution-level locational marginal prices.
"""

__version__ = "0.1.0"
