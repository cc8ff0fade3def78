"""
CTC, checked by brute force
===========================

The CTC loss sums the probability of every frame-level path that collapses to
the target. For short inputs the paths can simply be listed.
"""

import numpy as np
from scipy.special import log_softmax

from vsprompt.autodiff import Tensor, gradcheck
from vsprompt.autodiff import log_softmax as ad_log_softmax
from vsprompt.losses import collapse, ctc_brute_force, ctc_loss, greedy_ctc_decode, word_error_rate

rng = np.random.default_rng(0)
V = 3  # word ids 0..2, blank is 3
lp = log_softmax(rng.normal(size=(5, V + 1)), axis=-1)

print(collapse([0, 0, 3, 2, 2], blank=V))
print(ctc_loss(Tensor(lp), [0, 2]).item(), ctc_brute_force(lp, [0, 2]))

# %%
# A repeated word needs a blank between its copies, so [1, 1] needs 3 frames.
print(ctc_loss(Tensor(lp[:3]), [1, 1]).item(), ctc_brute_force(lp[:3], [1, 1]))

# %%
# Gradients through log-softmax agree with central differences.
x = Tensor(rng.normal(size=(5, V + 1)), requires_grad=True)
print(gradcheck(lambda: ctc_loss(ad_log_softmax(x), [0, 2]), [x]))

# %%
# Greedy decoding and word error rate.
hyp = greedy_ctc_decode(lp)
print(hyp, word_error_rate([0, 2], hyp))
