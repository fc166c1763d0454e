import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .utils import CapExceededError

DEFAULT_BALL_CAP = 2_000_000


def check_word(word: tuple[int, ...], degree: int) -> None:
    """
    the first letter picks one of the d+1 neighbors of the root,
    every later letter one of the d children (the father is excluded)
    """
    if degree < 2:
        raise ValueError(f"Degree must be at least 2, got {degree}")
    for position, letter in enumerate(word):
        if not isinstance(letter, (int, np.integer)) or isinstance(letter, bool):
            raise ValueError(f"Letter {letter!r} of word {word} is not an integer")
        upper = degree + 1 if position == 0 else degree
        if not 0 <= letter < upper:
            raise ValueError(
                f"Letter {letter} at position {position} of word {word} "
                f"is outside [0, {upper - 1}] for degree {degree}"
            )


def neighbor_words(word: tuple[int, ...], degree: int) -> list[tuple[int, ...]]:
    """
    father first (if any), then the children in letter order
    """
    width = degree + 1 if not word else degree
    children = [word + (letter,) for letter in range(width)]
    if not word:
        return children
    return [word[:-1]] + children


def word_distance(u: tuple[int, ...], v: tuple[int, ...]) -> int:
    common = 0
    for a, b in zip(u, v):
        if a != b:
            break
        common += 1
    return len(u) + len(v) - 2 * common


def word_to_dotted(word: tuple[int, ...]) -> str:
    return ".".join(str(letter) for letter in word)


def dotted_to_word(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text == "":
        return ()
    try:
        return tuple(int(part) for part in text.split("."))
    except ValueError:
        raise ValueError(f"Invalid dotted vertex address: {text!r}") from None


@dataclass(frozen=True, order=True)
class VertexAddr:
    word: tuple[int, ...]
    degree: int = field(compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "word", tuple(int(letter) for letter in self.word))
        check_word(self.word, self.degree)

    @classmethod
    def root(cls, degree: int) -> "VertexAddr":
        return cls((), degree)

    @classmethod
    def parse(cls, text: str, degree: int) -> "VertexAddr":
        return cls(dotted_to_word(text), degree)

    @property
    def depth(self) -> int:
        return len(self.word)

    def is_root(self) -> bool:
        return not self.word

    def father(self) -> "VertexAddr":
        if not self.word:
            raise ValueError("The root has no father")
        return VertexAddr(self.word[:-1], self.degree)

    def children(self) -> list["VertexAddr"]:
        width = self.degree + 1 if not self.word else self.degree
        return [VertexAddr(self.word + (letter,), self.degree) for letter in range(width)]

    def dotted(self) -> str:
        return word_to_dotted(self.word)

    def sort_key(self) -> tuple[int, tuple[int, ...]]:
        return len(self.word), self.word

    def __str__(self) -> str:
        return self.dotted() or "<root>"


@dataclass(frozen=True)
class EdgeAddr:
    """
    the edge between `parent` and its child `parent.word + (letter,)`
    """

    parent: VertexAddr
    letter: int

    def __post_init__(self) -> None:
        check_word(self.parent.word + (self.letter,), self.parent.degree)

    @classmethod
    def between(cls, u: VertexAddr, v: VertexAddr) -> "EdgeAddr":
        if u.degree != v.degree:
            raise ValueError(f"Vertices {u} and {v} live on trees of different degree")
        if v.word[:-1] == u.word and len(v.word) == len(u.word) + 1:
            return cls(u, v.word[-1])
        if u.word[:-1] == v.word and len(u.word) == len(v.word) + 1:
            return cls(v, u.word[-1])
        raise ValueError(f"Vertices {u} and {v} are not adjacent")

    @property
    def child(self) -> VertexAddr:
        return VertexAddr(self.parent.word + (self.letter,), self.parent.degree)

    def endpoints(self) -> tuple[VertexAddr, VertexAddr]:
        return self.parent, self.child


def neighbors(v: VertexAddr, d: int) -> list[VertexAddr]:
    """
    raises:
        ValueError: if v is not a well formed address of the tree of degree d
    """
    check_word(v.word, d)
    return [VertexAddr(word, d) for word in neighbor_words(v.word, d)]


def distance(u: VertexAddr, v: VertexAddr) -> int:
    if u.degree != v.degree:
        raise ValueError(f"Vertices {u} and {v} live on trees of different degree")
    return word_distance(u.word, v.word)


def ball_vertex_count(d: int, radius: int) -> int:
    return 1 + (d + 1) * (d**radius - 1) // (d - 1)


@dataclass(frozen=True)
class BallShape:
    """
    the ball of radius R around the root, without enumerating it.
    edges leaving the ball do not exist, so boundary vertices have degree 1
    """

    degree: int
    radius: int

    def __post_init__(self) -> None:
        if self.degree < 2:
            raise ValueError(f"Degree must be at least 2, got {self.degree}")
        if self.radius < 1:
            raise ValueError(f"Radius must be at least 1, got {self.radius}")

    def vertex_count(self) -> int:
        return ball_vertex_count(self.degree, self.radius)

    def contains_word(self, word: tuple[int, ...]) -> bool:
        return len(word) <= self.radius

    def contains(self, v: VertexAddr) -> bool:
        return v.degree == self.degree and len(v.word) <= self.radius

    def neighbor_words(self, word: tuple[int, ...]) -> list[tuple[int, ...]]:
        if len(word) >= self.radius:
            return [word[:-1]] if word else []
        return neighbor_words(word, self.degree)


class Ball:
    """
    vertices are ordered breadth first, lexicographically inside a level.
    edge i joins vertex i + 1 to its father, so the edge order follows the child order
    """

    def __init__(self, shape: BallShape, vertices: list[VertexAddr]) -> None:
        self.shape = shape
        self.vertices = tuple(vertices)
        self.vertex_index = {v: i for i, v in enumerate(self.vertices)}
        self.edges = tuple(EdgeAddr(v.father(), v.word[-1]) for v in self.vertices[1:])
        self.edge_index = {e: i for i, e in enumerate(self.edges)}

        endpoints = np.empty((len(self.edges), 2), dtype=np.int64)
        for i, v in enumerate(self.vertices[1:], start=1):
            endpoints[i - 1, 0] = self.vertex_index[v.father()]
            endpoints[i - 1, 1] = i
        endpoints.setflags(write=False)
        self.endpoints = endpoints

        incident: list[list[int]] = [[] for _ in self.vertices]
        for e, (a, b) in enumerate(endpoints.tolist()):
            incident[a].append(e)
            incident[b].append(e)
        self.incident = tuple(tuple(edges) for edges in incident)

    @property
    def degree(self) -> int:
        return self.shape.degree

    @property
    def radius(self) -> int:
        return self.shape.radius

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def neighbor_indices(self) -> tuple[tuple[int, ...], ...]:
        result = []
        for v, edges in enumerate(self.incident):
            result.append(
                tuple(
                    int(self.endpoints[e, 0] + self.endpoints[e, 1] - v) for e in edges
                )
            )
        return tuple(result)

    @cached_property
    def depths(self) -> np.ndarray:
        depths = np.array([v.depth for v in self.vertices], dtype=np.int64)
        depths.setflags(write=False)
        return depths

    def contains(self, v: VertexAddr) -> bool:
        return v in self.vertex_index

    def index_of(self, v: VertexAddr) -> int:
        try:
            return self.vertex_index[v]
        except KeyError:
            raise ValueError(f"Vertex {v} is outside the ball of radius {self.radius}") from None

    def edge_of(self, u: VertexAddr, v: VertexAddr) -> int:
        edge = EdgeAddr.between(u, v)
        try:
            return self.edge_index[edge]
        except KeyError:
            raise ValueError(f"Edge {u}~{v} is outside the ball of radius {self.radius}") from None

    def other_end(self, edge: int, vertex: int) -> int:
        a, b = self.endpoints[edge]
        if vertex == a:
            return int(b)
        if vertex == b:
            return int(a)
        raise ValueError(f"Edge {edge} does not touch vertex {vertex}")

    def __iter__(self) -> Iterator[VertexAddr]:
        return iter(self.vertices)

    def __repr__(self) -> str:
        return f"Ball(degree={self.degree}, radius={self.radius}, vertices={self.n_vertices})"


def build_ball(d: int, R: int, cap: int = DEFAULT_BALL_CAP) -> Ball:
    """
    raises:
        CapExceededError: if the ball has more than `cap` vertices
    """
    shape = BallShape(d, R)
    required = shape.vertex_count()
    if required > cap:
        raise CapExceededError("ball vertices", required, cap)

    level = [VertexAddr.root(d)]
    vertices = list(level)
    for _ in range(R):
        level = [child for v in level for child in v.children()]
        vertices.extend(level)
    return Ball(shape, vertices)


def truncation_radius(d: int, r0: float, T: float, c: float = 3.0) -> int:
    """
    radius past which a dual walk started inside the support of F is
    unlikely to travel before T: the walk jumps at rate d+1, so its jump
    count over [0, T] has mean and variance (d+1)T
    """
    if d < 2:
        raise ValueError(f"Degree must be at least 2, got {d}")
    if r0 < 0 or T < 0 or c < 0:
        raise ValueError(f"Support radius, horizon and safety must be nonnegative, got {r0}, {T}, {c}")
    rate = (d + 1) * T
    return max(1, math.ceil(r0 + rate + c * math.sqrt(rate)))


def support_radius(sites: list[VertexAddr] | tuple[VertexAddr, ...]) -> int:
    return max(v.depth for v in sites)
