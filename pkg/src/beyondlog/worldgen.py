"""Seeded synthetic e-commerce world.

Catalog, users with interest chains, session-structured behavior, censoring
of off-platform episodes (with the ground truth kept), and click impressions.

Topics form a ring: topic k is usually followed by topic k+1 in a user's
session walk. Primary category of topic k is ``k % n_primary`` so adjacent
topics always differ in primary category. A user's interests are a run of
consecutive topics on the ring.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import ItemKnowledge, KnowledgeEntry
from .rng import derive_rng

PLATFORM = "platform"
EXTERNAL = "external"

DEMAND_DIMS = ["comfort", "style", "occasion", "budget", "durability", "gifting", "care"]
PRODUCT_DIMS = ["material", "color", "fit", "function", "pattern", "size"]
SYNONYMS = {
    "material": ["material", "fabric", "composition", "textile"],
    "color": ["color", "colour", "shade"],
    "fit": ["fit", "cut", "silhouette"],
    "function": ["function", "usage", "feature"],
    "pattern": ["pattern", "print", "motif"],
    "size": ["size", "dimension"],
}
NOVEL_DIMS = ["closure", "battery", "lining", "strap", "heel", "sleeve", "capacity", "waterproof"]
# each demand dimension's cue words, used in search queries
DEMAND_CUES = {
    "comfort": ["comfy", "soft", "cozy"],
    "style": ["stylish", "trendy", "chic"],
    "occasion": ["wedding", "office", "party"],
    "budget": ["cheap", "affordable", "deal"],
    "durability": ["sturdy", "lasting", "tough"],
    "gifting": ["gift", "present", "birthday"],
    "care": ["washable", "easycare", "lowmaint"],
    "value": ["quality", "reliable", "bestseller"],
}
GENERIC_DIM = "value"


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_items: int = 320
    n_categories: int = 16          # leaf topics; primaries = n_categories // 2
    n_spu_groups: int = 130
    latent_dim: int = 16
    n_users: int = 1000
    interests_per_user: int = 4
    sessions_min: int = 5
    sessions_max: int = 9
    session_len_mean: float = 3.0   # 1 + Poisson(mean - 1), capped
    session_len_max: int = 8
    topic_switch_prob: float = 0.1  # within-session topic change per transition
    session_stay_prob: float = 0.2  # next session keeps the topic
    complement_prob: float = 0.5
    complement_fanout: int = 1      # successors per item for complement transitions
    generic_dim: bool = False       # every listing also carries a shared "value" demand dimension
    zipf_a: float = 1.1
    intra_gap_min: int = 10
    intra_gap_mean: float = 50.0
    inter_gap_min: int = 3600
    inter_gap_mean: float = 8 * 3600.0
    hide_prob: float = 0.3
    detectable_frac: float = 0.8
    hidden_len_max: int = 2         # undetectable runs have length 1..hidden_len_max
    external_topic: bool = False    # one interest topic per user lives entirely off-platform
    impressions_per_user: int = 24
    positive_frac: float = 0.5
    click_center: float = 0.2
    click_noise: float = 0.06
    seed: int = 7

    def __post_init__(self):
        for name in ("n_items", "n_categories", "n_spu_groups", "latent_dim", "n_users", "interests_per_user",
                     "sessions_min", "sessions_max", "session_len_max", "impressions_per_user", "hidden_len_max",
                     "complement_fanout"):
            if getattr(self, name) < 1:
                raise WorldConfigError(f"{name} must be >= 1")
        for name in ("hide_prob", "detectable_frac", "topic_switch_prob", "session_stay_prob",
                     "complement_prob", "positive_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise WorldConfigError(f"{name} must lie in [0, 1]")
        if self.sessions_max < self.sessions_min:
            raise WorldConfigError("sessions_max < sessions_min")
        if self.n_categories < 2:
            raise WorldConfigError("need at least 2 leaf categories")
        if self.interests_per_user > self.n_categories:
            raise WorldConfigError("interests_per_user exceeds n_categories")
        if self.n_items < self.n_categories:
            raise WorldConfigError("need at least one item per leaf category")
        if self.click_noise < 0:
            raise WorldConfigError("click_noise must be >= 0")

    @property
    def n_primary(self) -> int:
        return max(1, self.n_categories // 2)


@dataclass
class SynthItem:
    item_id: int
    topic: int
    category_path: tuple[str, str]
    spu_id: int
    latent: np.ndarray = field(repr=False)
    knowledge: ItemKnowledge = field(repr=False)
    features: dict = field(default_factory=dict)
    title: str = ""
    attributes: list = field(default_factory=list)   # merchant key-value pairs
    description: str = ""
    complements: list = field(default_factory=list)

    def primary(self) -> str:
        return self.category_path[0]


@dataclass
class User:
    user_id: int
    interests: list[int]
    external: int | None = None


@dataclass
class KnowledgeTables:
    """Everything the offline LLM stand-in is allowed to know."""
    demand_dims: dict[str, list[str]]    # primary -> demand dimensions
    product_dims: dict[str, list[str]]   # primary -> canonical product dimensions
    novel_dims: dict[str, str]           # leaf path -> extra product dimension
    synonyms: dict[str, list[str]]
    lexicon: dict[str, str]              # keyword -> dimension
    cues: dict[str, list[str]]
    queries: dict[str, list[str]]        # primary -> search queries


@dataclass
class World:
    config: WorldConfig
    items: list[SynthItem]
    users: list[User]
    topic_vectors: np.ndarray
    tables: KnowledgeTables

    def item(self, item_id: int) -> SynthItem:
        return self.items[item_id]

    def categories(self) -> dict[int, tuple[str, str]]:
        return {it.item_id: it.category_path for it in self.items}


@dataclass(frozen=True)
class Event:
    item_id: int
    ts: int
    channel: str = PLATFORM


@dataclass
class FullSequence:
    user_id: int
    events: list[Event]
    sessions: list[int]      # session index per event


@dataclass
class Gap:
    after_index: int         # observed index preceding the hidden run
    hidden_item_ids: list[int]
    detectable: bool = True


@dataclass
class HiddenTruth:
    user_id: int
    full: list[Event]
    observed: list[Event]
    gaps: list[Gap]


@dataclass
class Impression:
    user_id: int
    item_id: int
    f_u: list[float]
    f_c: list[float]
    label: int
    bayes: float = 0.0


# ---------------------------------------------------------------- catalog

def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    cons, vows = "bdfgklmnprstvz", "aeiou"
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def topic_primary(topic: int, cfg: WorldConfig) -> int:
    return topic % cfg.n_primary


def category_path(topic: int, cfg: WorldConfig) -> tuple[str, str]:
    p = topic_primary(topic, cfg)
    return (f"cat{p:02d}", f"cat{p:02d}/sub{topic:02d}")


def _build_tables(cfg: WorldConfig, rng: np.random.Generator):
    taken: set[str] = set()
    for cues in DEMAND_CUES.values():
        taken.update(cues)
    demand, product, novel = {}, {}, {}
    for p in range(cfg.n_primary):
        prim = f"cat{p:02d}"
        demand[prim] = [DEMAND_DIMS[(p + j) % len(DEMAND_DIMS)] for j in range(3)]
        if cfg.generic_dim:
            demand[prim].append(GENERIC_DIM)
        product[prim] = [PRODUCT_DIMS[(p + j) % len(PRODUCT_DIMS)] for j in range(3)]
    for k in range(cfg.n_categories):
        # second-level topics get one subcategory-specific attribute
        if k >= cfg.n_primary:
            novel[category_path(k, cfg)[1]] = NOVEL_DIMS[k % len(NOVEL_DIMS)]
    # vocab[topic][dim] -> words; shared[dim] -> words used across topics
    vocab: dict[int, dict[str, list[str]]] = {}
    shared = {d: _pseudo_words(rng, 4, taken) for d in DEMAND_DIMS + PRODUCT_DIMS + NOVEL_DIMS + [GENERIC_DIM]}
    for k in range(cfg.n_categories):
        prim, leaf = category_path(k, cfg)
        dims = demand[prim] + product[prim] + ([novel[leaf]] if leaf in novel else [])
        vocab[k] = {d: (shared[d] if d == GENERIC_DIM else _pseudo_words(rng, 6, taken)) for d in dims}
        vocab[k]["_noun"] = _pseudo_words(rng, 2, taken)
    lexicon = {}
    for d, ws in shared.items():
        for w in ws:
            lexicon[w] = d
    for k, per in vocab.items():
        for d, ws in per.items():
            if d != "_noun":
                for w in ws:
                    lexicon[w] = d
    queries = {}
    for p in range(cfg.n_primary):
        prim = f"cat{p:02d}"
        noun = vocab[p]["_noun"][0]
        qs = []
        for j, d in enumerate(demand[prim]):
            for c in DEMAND_CUES[d]:
                qs.append(f"{c} {noun} for me" if j % 2 else f"looking for {c} {noun}")
        queries[prim] = qs
    tables = KnowledgeTables(demand, product, novel, {k: list(v) for k, v in SYNONYMS.items()},
                             lexicon, {k: list(v) for k, v in DEMAND_CUES.items()}, queries)
    return tables, vocab, shared


def _zipf_weights(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


def generate_world(cfg: WorldConfig) -> World:
    rng = derive_rng(cfg.seed, "world")
    tables, vocab, shared = _build_tables(cfg, rng)
    topic_vectors = rng.normal(size=(cfg.n_categories, cfg.latent_dim))
    topic_vectors /= np.linalg.norm(topic_vectors, axis=1, keepdims=True)

    topics = np.arange(cfg.n_items) % cfg.n_categories
    by_topic = [np.flatnonzero(topics == k) for k in range(cfg.n_categories)]
    # spu groups never cross topics; ~n_items / n_spu_groups items each
    spu_of = np.zeros(cfg.n_items, dtype=np.int64)
    per_group = max(2, int(round(cfg.n_items / cfg.n_spu_groups))) if cfg.n_spu_groups < cfg.n_items else 1
    next_spu = 0
    for k in range(cfg.n_categories):
        members = by_topic[k]
        for start in range(0, len(members), per_group):
            chunk = members[start:start + per_group]
            if len(chunk) < per_group and start > 0 and per_group > 1:
                spu_of[chunk] = next_spu - 1     # fold a short tail into the previous group
            else:
                spu_of[chunk] = next_spu
                next_spu += 1

    spu_latent, spu_words, spu_price = {}, {}, {}
    items: list[SynthItem] = []
    for k in range(cfg.n_categories):
        members = by_topic[k]
        pop = _zipf_weights(len(members), cfg.zipf_a)
        comp = [rng.permutation(len(members)) for _ in range(cfg.complement_fanout)]
        for rank, iid in enumerate(members):
            iid = int(iid)
            s = int(spu_of[iid])
            prim, leaf = category_path(k, cfg)
            if s not in spu_latent:
                noise = rng.normal(size=cfg.latent_dim) * 0.35 / np.sqrt(cfg.latent_dim) * 2
                v = topic_vectors[k] + noise
                spu_latent[s] = v / np.linalg.norm(v)
                dims = tables.demand_dims[prim] + tables.product_dims[prim] + (
                    [tables.novel_dims[leaf]] if leaf in tables.novel_dims else [])
                spu_words[s] = {}
                for d in dims:
                    own = [str(w) for w in rng.choice(vocab[k][d], 2, replace=False)]
                    extra = [w for w in shared[d] if w not in own]
                    spu_words[s][d] = own + [str(rng.choice(extra))]
                spu_price[s] = int(rng.integers(0, 5))
            words = {d: list(w) for d, w in spu_words[s].items()}
            if "color" in words:
                # listings in one SPU differ by color only
                words["color"][0] = str(rng.choice([w for w in vocab[k]["color"] if w not in words["color"][1:]]))
            demand = tuple(KnowledgeEntry(d, f"{d} shaped by {', '.join(words[d])}", tuple(words[d]))
                           for d in tables.demand_dims[prim])
            pdims = tables.product_dims[prim] + ([tables.novel_dims[leaf]] if leaf in tables.novel_dims else [])
            product = tuple(KnowledgeEntry(d, f"{d} given by {', '.join(words[d])}", tuple(words[d]))
                            for d in pdims)
            attrs = []
            for d in pdims:
                key = str(rng.choice(SYNONYMS[d])) if d in SYNONYMS else d
                attrs.append((key, words[d][0]))
            desc = ". ".join(f"{' '.join(words[d])}" for d in tables.demand_dims[prim] + pdims)
            succ = []
            for perm in comp:
                o = int(members[perm[rank]])
                succ.append(o if o != iid or len(members) == 1 else int(members[(perm[rank] + 1) % len(members)]))
            items.append(SynthItem(
                item_id=iid, topic=k, category_path=(prim, leaf), spu_id=s,
                latent=(spu_latent[s] + rng.normal(size=cfg.latent_dim) * 0.02).astype(np.float64),
                knowledge=ItemKnowledge(iid, demand, product),
                features={"price_bucket": spu_price[s], "popularity": float(pop[rank])},
                title=f"{vocab[k]['_noun'][0]} {words[pdims[0]][0]} {iid}",
                attributes=attrs, description=desc, complements=succ))
    items.sort(key=lambda it: it.item_id)

    users = []
    for u in range(cfg.n_users):
        ur = derive_rng(cfg.seed, "user", u)
        start = int(ur.integers(cfg.n_categories))
        interests = [(start + j) % cfg.n_categories for j in range(cfg.interests_per_user)]
        ext = None
        if cfg.external_topic and len(interests) >= 3:
            ext = interests[int(ur.integers(1, len(interests) - 1))]
        users.append(User(u, interests, ext))
    return World(cfg, items, users, topic_vectors, tables)


# ---------------------------------------------------------------- sequences

def _topic_tables(world: World):
    cfg = world.config
    members = [[] for _ in range(cfg.n_categories)]
    for it in world.items:
        members[it.topic].append(it.item_id)
    weights = [np.array([world.items[i].features["popularity"] for i in m]) for m in members]
    return members, [w / w.sum() for w in weights]


def _user_sequence(world: World, user: User, members, weights) -> FullSequence:
    cfg = world.config
    rng = derive_rng(cfg.seed, "sequence", user.user_id)
    n_sessions = int(rng.integers(cfg.sessions_min, cfg.sessions_max + 1))
    t = int(rng.integers(0, 5 * 86400))
    pos = 0
    events, sess = [], []
    for s in range(n_sessions):
        if s > 0:
            if rng.random() >= cfg.session_stay_prob:
                pos = (pos + 1) % len(user.interests)
            t += cfg.inter_gap_min + int(rng.exponential(cfg.inter_gap_mean))
        topic = user.interests[pos]
        length = min(cfg.session_len_max, 1 + int(rng.poisson(max(cfg.session_len_mean - 1.0, 0.0))))
        prev = None
        for j in range(length):
            if j > 0:
                t += cfg.intra_gap_min + int(rng.exponential(cfg.intra_gap_mean))
                if len(user.interests) > 1 and rng.random() < cfg.topic_switch_prob:
                    choices = [x for x in user.interests if x != topic]
                    topic = int(choices[rng.integers(len(choices))])
                    prev = None
            if prev is not None and rng.random() < cfg.complement_prob:
                succ = world.items[prev].complements
                item = succ[int(rng.integers(len(succ)))] if len(succ) > 1 else succ[0]
            else:
                item = int(rng.choice(members[topic], p=weights[topic]))
            events.append(Event(item, t))
            sess.append(s)
            prev = item
    if user.external is not None:
        # an off-platform topic never opens or closes the log
        ext_items = {i for i in members[user.external]}
        while events and events[-1].item_id in ext_items:
            events.pop()
            sess.pop()
        while events and events[0].item_id in ext_items:
            events.pop(0)
            sess.pop(0)
    return FullSequence(user.user_id, events, sess)


def generate_sequences(world: World, cfg: WorldConfig | None = None) -> list[FullSequence]:
    if cfg is not None and cfg is not world.config:
        world = World(cfg, world.items, world.users, world.topic_vectors, world.tables)
    members, weights = _topic_tables(world)
    return [_user_sequence(world, u, members, weights) for u in world.users]


def within_session_gaps(seqs: list[FullSequence]) -> np.ndarray:
    gaps = []
    for s in seqs:
        for a in range(1, len(s.events)):
            if s.sessions[a] == s.sessions[a - 1]:
                gaps.append(s.events[a].ts - s.events[a - 1].ts)
    return np.asarray(gaps, dtype=np.float64)


def session_gap_quantile(seqs: list[FullSequence], q: float = 0.95) -> float:
    g = within_session_gaps(seqs)
    return float(np.quantile(g, q)) if len(g) else 1.0


# ---------------------------------------------------------------- censoring

def _session_spans(sessions: list[int]) -> list[tuple[int, int]]:
    spans, start = [], 0
    for a in range(1, len(sessions) + 1):
        if a == len(sessions) or sessions[a] != sessions[a - 1]:
            spans.append((start, a))
            start = a
    return spans


def censor(world: World, full: list[FullSequence], cfg: WorldConfig | None = None):
    """Mark off-platform episodes and drop them from the observed log.

    Returns ``(observed, truths)`` where ``observed[u]`` lists platform events
    and ``truths[u].gaps`` locate each hidden run against observed indices.
    """
    cfg = cfg or world.config
    observed, truths = [], []
    for seq in full:
        rng = derive_rng(cfg.seed, "censor", seq.user_id)
        n = len(seq.events)
        hidden = np.zeros(n, dtype=bool)
        kind_detectable = np.zeros(n, dtype=bool)
        user = world.users[seq.user_id]
        if user.external is not None:
            for a, e in enumerate(seq.events):
                if world.items[e.item_id].topic == user.external:
                    hidden[a] = True
                    kind_detectable[a] = True
        spans = _session_spans(seq.sessions)
        prev_hidden = False
        for j in range(1, len(spans) - 1):
            a, b = spans[j]
            if hidden[a:b].any():
                prev_hidden = True
                continue
            if rng.random() >= cfg.hide_prob:
                prev_hidden = False
                continue
            if rng.random() < cfg.detectable_frac:
                before = seq.events[spans[j - 1][1] - 1].item_id
                after = seq.events[spans[j + 1][0]].item_id
                if not prev_hidden and world.items[before].primary() != world.items[after].primary():
                    hidden[a:b] = True
                    kind_detectable[a:b] = True
                    prev_hidden = True
                    continue
            else:
                length = b - a
                run = int(rng.integers(1, cfg.hidden_len_max + 1))
                if length - 2 >= run:
                    s0 = a + 1 + int(rng.integers(0, length - 1 - run))
                    hidden[s0:s0 + run] = True
            prev_hidden = False
        full_events = [Event(e.item_id, e.ts, EXTERNAL if hidden[a] else PLATFORM)
                       for a, e in enumerate(seq.events)]
        obs = [e for e in full_events if e.channel == PLATFORM]
        gaps: list[Gap] = []
        k = -1
        for a, e in enumerate(full_events):
            if e.channel == PLATFORM:
                k += 1
            elif gaps and a > 0 and full_events[a - 1].channel == EXTERNAL:
                gaps[-1].hidden_item_ids.append(e.item_id)
            else:
                gaps.append(Gap(k, [e.item_id], bool(kind_detectable[a])))
        observed.append(obs)
        truths.append(HiddenTruth(seq.user_id, full_events, obs, gaps))
    return observed, truths


def reinsert(truth: HiddenTruth) -> list[int]:
    """Observed sequence with hidden runs put back (item ids only)."""
    out = []
    by_after: dict[int, list[int]] = {}
    for g in truth.gaps:
        by_after.setdefault(g.after_index, []).extend(g.hidden_item_ids)
    out.extend(by_after.get(-1, []))
    for i, e in enumerate(truth.observed):
        out.append(e.item_id)
        out.extend(by_after.get(i, []))
    return out


# ---------------------------------------------------------------- clicks

def user_latent(world: World, truth_full: list[Event], user: User) -> np.ndarray:
    counts = np.zeros(world.config.n_categories)
    for e in truth_full:
        counts[world.items[e.item_id].topic] += 1
    for k in user.interests:
        counts[k] += 1.0
    v = counts @ world.topic_vectors
    return v / max(np.linalg.norm(v), 1e-12)


def click_probability(affinity: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    if cfg.click_noise == 0:
        return (np.asarray(affinity) > cfg.click_center).astype(np.float64)
    z = (np.asarray(affinity) - cfg.click_center) / cfg.click_noise
    return 1.0 / (1.0 + np.exp(-z))


def label_clicks(world: World, observed, cfg: WorldConfig | None = None,
                 truths: list[HiddenTruth] | None = None) -> list[Impression]:
    """Impressions with Bernoulli click labels drawn from latent affinity.

    ``observed`` supplies the user features; affinity uses the user's full
    behavior when ``truths`` is given, otherwise the observed log.
    """
    cfg = cfg or world.config
    members, _ = _topic_tables(world)
    item_lat = np.stack([it.latent for it in world.items])
    out = []
    for u, obs in enumerate(observed):
        user = world.users[u]
        rng = derive_rng(cfg.seed, "clicks", u)
        full = truths[u].full if truths is not None else obs
        lat = user_latent(world, full, user)
        n_pos = int(round(cfg.impressions_per_user * cfg.positive_frac))
        cands = []
        for _ in range(n_pos):
            k = user.interests[int(rng.integers(len(user.interests)))]
            cands.append(int(rng.choice(members[k])))
        cands.extend(int(x) for x in rng.integers(0, len(world.items), cfg.impressions_per_user - n_pos))
        aff = item_lat[cands] @ lat
        p = click_probability(aff, cfg)
        labels = (rng.random(len(cands)) < p).astype(int) if cfg.click_noise > 0 else p.astype(int)
        last_ts = obs[-1].ts if obs else 0
        hour = ((last_ts + 3600) // 3600) % 24
        f_u = [float(np.log1p(len(obs)) / 5.0),
               float(np.mean([world.items[e.item_id].features["price_bucket"] for e in obs]) / 4.0) if obs else 0.0]
        f_c = [float(np.sin(2 * np.pi * hour / 24)), float(np.cos(2 * np.pi * hour / 24))]
        for c, y, pr in zip(cands, labels, p):
            out.append(Impression(u, c, f_u, f_c, int(y), float(pr)))
    return out


# ---------------------------------------------------------------- presets

def preset(name: str, **overrides) -> WorldConfig:
    """``default`` or ``gbr_value`` (hidden topic carries click signal)."""
    if name == "default":
        base = {}
    elif name == "gbr_value":
        base = {"external_topic": True, "hide_prob": 0.0}
    else:
        raise WorldConfigError(f"unknown world preset {name!r}")
    base.update(overrides)
    return WorldConfig(**base)


def config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)
