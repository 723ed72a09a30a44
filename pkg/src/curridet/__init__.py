"""curridet: dynamic-curriculum semi-supervised object detection at desk
scale. A student/teacher self-training loop with five time-varying
policies, a toy set-prediction detector over synthetic scenes, and the
evaluation / pseudo-label-analysis stack around it."""

__version__ = "0.1.0"
