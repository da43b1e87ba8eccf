"""Attribute tokens cannot reach the identity branch of a TDCA block.

Perturbs the attribute tokens and compares how much each branch output moves,
for the decoupled block and for the single-softmax concat baseline.
"""
import torch

from attrdiff.tdca import CONCAT, TRIPLET, ConditioningBundle, TDCABlock

torch.manual_seed(0)
dim, ctx = 32, 16
blocks = {}
for topology in (TRIPLET, CONCAT):
    blk = TDCABlock(dim, ctx, heads=4, topology=topology).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.normal_(0, 0.2)
    blocks[topology] = blk

x = torch.randn(1, 64, dim, dtype=torch.float64)
bundle = ConditioningBundle(*(torch.randn(1, n, ctx, dtype=torch.float64) for n in (8, 4, 6)))
moved = ConditioningBundle(bundle.text_tokens, bundle.id_tokens, bundle.attr_tokens + torch.randn(1, 6, ctx, dtype=torch.float64))

tdca = blocks[TRIPLET]
q = tdca.query(x)
print("TDCA identity branch change:  ", (tdca.id_branch(q, bundle) - tdca.id_branch(q, moved)).norm().item())
print("TDCA attribute branch change: ", (tdca.attr_branch(q, bundle) - tdca.attr_branch(q, moved)).norm().item())

cat = blocks[CONCAT]
q = cat.query(x)
print("concat shared branch change:  ", (cat.concat_branch(q, bundle) - cat.concat_branch(q, moved)).norm().item())
