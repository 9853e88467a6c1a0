"""Bit layout of a leaf PTE's flag byte.

Protection bits share the layout of :class:`ptsim.vmem.Prot` so a VMA's
protection can be OR-ed straight into a PTE.
"""

PRESENT = 0x01
PROT_R = 0x02
PROT_W = 0x04
PROT_X = 0x08
ACCESSED = 0x10
DIRTY = 0x20

PROT_MASK = PROT_R | PROT_W | PROT_X
