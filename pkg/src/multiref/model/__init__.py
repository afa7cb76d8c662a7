"""First-order-motion backbone networks."""
