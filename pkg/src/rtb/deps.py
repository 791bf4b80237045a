"""Coupled-channel dependency analysis.

Decomposes a validated graph into channel *slots* (one per prunable channel
position), unifies slots that must be pruned together, and reports them as
:class:`ChannelGroup` partitions.  Supported coupling patterns:

* producer out-channels tied to each consumer's in-channels,
* ``add`` operands sharing one group,
* ``concat`` splitting a consumer's in-channels into per-producer slices,
* depthwise convolution tying its in- and out-channels.

Anything else raises :class:`UnsupportedPattern` — pruning safety requires
complete dependency knowledge, so there is no best-effort fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UnsupportedPattern, ValidationError
from .graph import NetworkGraph, _topo_order, validate_graph

ROLE_OUT = "out-channels"
ROLE_IN = "in-channels"


@dataclass(frozen=True)
class Membership:
    layer_id: str
    role: str
    position: int


@dataclass
class GroupMember:
    layer_id: str
    role: str
    channels: tuple


@dataclass
class ChannelGroup:
    """Channels that must be pruned together across every member slice."""

    key: str
    cause: str
    width: int
    members: list
    # channel index k -> list of Membership for that coupled channel
    channel_memberships: list = field(default_factory=list)

    def member_layers(self):
        return sorted({m.layer_id for m in self.members})


class _UnionFind:
    def __init__(self):
        self.parent = []

    def make(self):
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        # lower root wins: keeps class representatives deterministic
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra


class _Analysis:
    def __init__(self):
        self.uf = _UnionFind()
        self.slots = {}          # layer id -> list of slot indices (output channels)
        self.memberships = {}    # slot -> list of Membership
        self.nonprunable = set()  # slots pinned by graph inputs/outputs
        self.add_unified = set()  # root slots that took part in an add
        self.depthwise = set()    # root slots tied through a depthwise conv

    def attach(self, slot, layer_id, role, position):
        self.memberships.setdefault(slot, []).append(Membership(layer_id, role, position))


def _conv_mode(layer):
    a = layer.attrs
    if layer.kind != "conv2d":
        return "standard"
    g = a["groups"]
    if g == 1:
        return "standard"
    if g == a["cin"] and g == a["cout"]:
        return "depthwise"
    raise UnsupportedPattern(
        f"layer {layer.id!r}: grouped convolution with groups={g}, "
        f"cin={a['cin']}, cout={a['cout']} (only groups=1 or depthwise "
        f"groups=cin=cout are analyzable)"
    )


def analyze_channels(g: NetworkGraph) -> _Analysis:
    """Slot-level coupling analysis over a validated graph."""
    problems = validate_graph(g)
    if problems:
        raise ValidationError("; ".join(problems))
    order, _ = _topo_order(g)
    an = _Analysis()
    for l in order:
        a = l.attrs
        if l.kind == "input":
            slots = [an.uf.make() for _ in range(a["channels"])]
            an.slots[l.id] = slots
            an.nonprunable.update(slots)
        elif l.kind in ("conv2d", "conv3d", "deconv3d"):
            in_slots = an.slots[l.inputs[0]]
            if l.kind == "conv2d" and _conv_mode(l) == "depthwise":
                for p, s in enumerate(in_slots):
                    an.attach(s, l.id, ROLE_IN, p)
                    an.attach(s, l.id, ROLE_OUT, p)
                    an.depthwise.add(s)
                an.slots[l.id] = list(in_slots)
            else:
                for p, s in enumerate(in_slots):
                    an.attach(s, l.id, ROLE_IN, p)
                out = [an.uf.make() for _ in range(a["cout"])]
                for p, s in enumerate(out):
                    an.attach(s, l.id, ROLE_OUT, p)
                an.slots[l.id] = out
        elif l.kind == "affine":
            in_slots = an.slots[l.inputs[0]]
            for p, s in enumerate(in_slots):
                an.attach(s, l.id, ROLE_OUT, p)
            an.slots[l.id] = list(in_slots)
        elif l.kind == "attention_gate":
            in_slots = an.slots[l.inputs[0]]
            for p, s in enumerate(in_slots):
                an.attach(s, l.id, ROLE_IN, p)
                an.attach(s, l.id, ROLE_OUT, p)
            an.slots[l.id] = list(in_slots)
        elif l.kind in ("activation", "softmax", "pool_gap"):
            an.slots[l.id] = list(an.slots[l.inputs[0]])
        elif l.kind == "add":
            base = an.slots[l.inputs[0]]
            for other_id in l.inputs[1:]:
                other = an.slots[other_id]
                for sa, sb in zip(base, other):
                    root = an.uf.union(sa, sb)
                    an.add_unified.add(root)
            an.slots[l.id] = list(base)
        elif l.kind == "concat":
            merged = []
            for src in l.inputs:
                merged.extend(an.slots[src])
            an.slots[l.id] = merged
        elif l.kind == "output":
            an.nonprunable.update(an.slots[l.inputs[0]])
        else:
            raise UnsupportedPattern(f"layer {l.id!r}: kind {l.kind!r} has no channel model")
    return an


def build_dependency_groups(g: NetworkGraph) -> list:
    """Partition all prunable channel positions into coupled groups."""
    an = analyze_channels(g)
    # gather classes: root slot -> memberships of every slot in the class
    classes = {}
    pinned = {an.uf.find(s) for s in an.nonprunable}
    all_slots = sorted(an.memberships)
    for s in all_slots:
        root = an.uf.find(s)
        classes.setdefault(root, []).extend(an.memberships[s])
    add_roots = {an.uf.find(s) for s in an.add_unified}
    dw_roots = {an.uf.find(s) for s in an.depthwise}

    by_id = g.by_id()
    position = {l.id: i for i, l in enumerate(g.layers)}

    # bucket classes by their (layer, role) membership signature
    buckets = {}
    for root, mships in classes.items():
        if root in pinned:
            continue
        sig = frozenset((m.layer_id, m.role) for m in mships)
        if not any(by_id[lid].kind in ("conv2d", "conv3d", "deconv3d") and role == ROLE_OUT
                   for lid, role in sig):
            # no weight-bearing producer: nothing to prune (e.g. dangling affine)
            continue
        buckets.setdefault(sig, []).append((root, mships))

    groups = []
    for sig, cls in buckets.items():
        anchor_layer, anchor_role = min(
            sig, key=lambda lr: (position[lr[0]], lr[1])
        )

        def anchor_pos(entry):
            _, mships = entry
            return min(m.position for m in mships
                       if (m.layer_id, m.role) == (anchor_layer, anchor_role))

        cls_sorted = sorted(cls, key=anchor_pos)
        channel_memberships = [
            sorted(mships, key=lambda m: (position[m.layer_id], m.role, m.position))
            for _, mships in cls_sorted
        ]
        members = {}
        for mships in channel_memberships:
            for m in mships:
                members.setdefault((m.layer_id, m.role), set()).add(m.position)
        member_list = [
            GroupMember(lid, role, tuple(sorted(chans)))
            for (lid, role), chans in sorted(
                members.items(), key=lambda kv: (position[kv[0][0]], kv[0][1])
            )
        ]
        roots = {root for root, _ in cls_sorted}
        if roots & add_roots:
            cause = "residual-add"
        elif roots & dw_roots:
            cause = "depthwise-tie"
        elif _is_concat_slice(g, member_list, by_id):
            cause = "concat-slice"
        else:
            cause = "producer-consumer"
        first = anchor_pos(cls_sorted[0])
        key = f"{anchor_layer}.{anchor_role}[{first}+{len(cls_sorted)}]"
        groups.append(ChannelGroup(
            key=key,
            cause=cause,
            width=len(cls_sorted),
            members=member_list,
            channel_memberships=channel_memberships,
        ))
    groups.sort(key=lambda gr: (position[gr.members[0].layer_id], gr.key))
    return groups


def _is_concat_slice(g, member_list, by_id):
    # a consumer whose in-channel positions cover only part of its in-axis
    for m in member_list:
        if m.role != ROLE_IN:
            continue
        l = by_id[m.layer_id]
        if l.kind in ("conv2d", "conv3d", "deconv3d"):
            if len(m.channels) < l.attrs["cin"]:
                return True
    return False
