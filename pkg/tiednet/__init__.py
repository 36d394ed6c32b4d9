"""
tiednet: a from-scratch numpy neural-network library for transpose-tied
(parameter-efficient) vision models.

A single weight matrix W serves in two roles, W and W^T: attention ties the
query projection to the output projection and the key projection to the
value projection, the feed-forward block expands with W and contracts with
W^T, and a ResNet bottleneck reduces with a 1×1 W and expands with its
transpose, optionally sharing one W across all identity blocks of a stage.
Tying is expressed as two references to one `Parameter`; the reverse-mode
tape accumulates the gradients of both roles into its single buffer.

The package provides the tensor/tape core (`tensor`, `ops`), conventional
and tied layers (`nn`, `tied`), ViT / ResNet construction from a JSON
`ModelConfig` (`config`, `zoo`), parameter and MAC auditing (`audit`), a
finite-difference gradient checker (`gradcheck`), a toy training loop on
synthetic data (`data`, `optim`, `train`), binary checkpoints
(`checkpoint`) and the `tiednet` command line (`cli`).

Example Usage:
--------------
```python
from tiednet import build_model, count_macs, parse_config

cfg = parse_config(open('configs/vit-pe.json', 'rb').read())
print(count_macs(build_model(cfg)).to_text())
```
"""
from .api import *
