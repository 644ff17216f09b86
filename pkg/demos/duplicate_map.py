"""
Canonical duplicate map
=======================

Duplicate links in a tracker form chains and fans: B duplicates A, C
duplicates B, and sometimes one report is marked as a duplicate of two
different originals. Collapsing these links gives every duplicate a single
canonical parent, the smallest id in its group.
"""

from bugdup import DuplicatePair, DupOrgMap, build_intermediate_map, insert_pair, merge_maps

# A chain collapses onto its oldest report.
chain = build_intermediate_map([(2, 1), (3, 2), (4, 3)])
print("chain:", chain.as_dict())

# Report 7 is linked to both 5 and 6. The two groups merge under 5, and 6
# becomes a duplicate of 5 too (a "sibling demotion").
m = DupOrgMap()
insert_pair(m, DuplicatePair(7, 6))
insert_pair(m, DuplicatePair(7, 5))
print("conflict:", m.as_dict(), "demotions:", m.demotions)

# Train and test pair files are folded into one map.
train = build_intermediate_map([(11, 10), (12, 10)])
test = build_intermediate_map([(10, 9), (13, 12)])
final = merge_maps(train, test)
print("merged:", final.as_dict())
print("roots:", sorted(final.roots()))
