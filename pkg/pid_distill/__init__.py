"""Physics informed distillation of probability-flow ODE teachers into single-step students."""
