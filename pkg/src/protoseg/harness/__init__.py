"""Everything around the math: data synthesis, episode sampling, training,
evaluation, configuration, and the command line."""
