"""Lazy configuration system.

Configs are plain executable Python files that build trees of deferred
constructor calls (:class:`LazySpec`). Loading a config never constructs
model objects; construction happens only in :func:`instantiate`. Trees are
value-semantic: overrides produce new trees, nothing is mutated in place,
and a tree of plain data and LazySpecs serializes to a canonical, byte-stable
text form that loads back to an equal tree.
"""

from __future__ import annotations

import ast
import builtins
import copy
import dataclasses
import importlib
import keyword
import os
import types
from typing import Any, Iterable, Sequence

__all__ = [
    "LazySpec",
    "L",
    "ConfigTree",
    "load_config",
    "apply_overrides",
    "instantiate",
    "dump_config",
    "ConfigError",
    "ConfigFileMissingError",
    "ConfigEvaluationError",
    "EmptyConfigError",
    "BadKeyPathError",
    "OverrideParseError",
    "TargetNotFoundError",
    "ConstructionError",
    "UnserializableError",
]

# Module roots a config file may import. Everything else is rejected so that
# evaluating an untrusted-ish config cannot reach process/filesystem control.
_ALLOWED_IMPORT_ROOTS = ("detkit", "math", "itertools", "functools", "copy", "pathlib")


class ConfigError(Exception):
    """Base class for all configuration errors."""


class ConfigFileMissingError(ConfigError):
    pass


class ConfigEvaluationError(ConfigError):
    """The config file raised while executing."""


class EmptyConfigError(ConfigError):
    """The config file defined no usable top-level names."""


class BadKeyPathError(ConfigError):
    """A dotted override path does not address a node and cannot create one."""


class OverrideParseError(ConfigError):
    """An override string is not of the form ``dotted.key=value``."""


class TargetNotFoundError(ConfigError):
    """A LazySpec target did not resolve to an importable object."""


class ConstructionError(ConfigError):
    """A resolved constructor raised; carries the dotted config path."""


class UnserializableError(ConfigError):
    """A tree leaf holds a live object that has no canonical text form."""


@dataclasses.dataclass
class LazySpec:
    """A deferred constructor call: dotted target name plus keyword arguments.

    ``kwargs`` values may be scalars, lists, mappings, or nested LazySpecs to
    arbitrary finite depth. Nothing is imported or constructed until
    :func:`instantiate` is called on the spec.
    """

    target: str
    kwargs: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.target, str) or not self.target:
            raise TypeError("LazySpec target must be a non-empty dotted string")
        for key in self.kwargs:
            if not isinstance(key, str) or not key.isidentifier():
                raise TypeError(f"LazySpec kwarg name {key!r} is not a valid identifier")


def L(target, **kwargs) -> LazySpec:
    """Build a :class:`LazySpec`.

    ``target`` is a fully-qualified dotted string, or a callable whose
    qualified name is recorded (the callable itself is not stored, keeping
    the spec serializable).
    """
    if not isinstance(target, str) and callable(target):
        target = f"{target.__module__}.{target.__qualname__}"
    return LazySpec(target=target, kwargs=kwargs)


@dataclasses.dataclass
class ConfigTree:
    """A mapping of top-level config names to values.

    Values are scalars, lists, dicts, or LazySpecs. Dotted paths address
    nested nodes (``"model.backbone.depth"``); a LazySpec segment traverses
    into its kwargs, an integer segment indexes a list. Trees are immutable
    after load by convention: there is no in-place mutator API and
    :func:`apply_overrides` works on a deep copy.
    """

    root: dict

    def __getitem__(self, path: str) -> Any:
        return _get_by_path(self.root, path)

    def get(self, path: str, default: Any = None) -> Any:
        try:
            return _get_by_path(self.root, path)
        except BadKeyPathError:
            return default

    def __contains__(self, path: str) -> bool:
        try:
            _get_by_path(self.root, path)
            return True
        except BadKeyPathError:
            return False

    def keys(self):
        return self.root.keys()


def _step(node: Any, segment: str, path: str) -> Any:
    """One dotted-path step into ``node``; raises BadKeyPathError on a miss."""
    if isinstance(node, LazySpec):
        node = node.kwargs
    if isinstance(node, dict):
        if segment in node:
            return node[segment]
        raise BadKeyPathError(f"no key {segment!r} under '{path}'")
    if isinstance(node, (list, tuple)) and segment.lstrip("-").isdigit():
        index = int(segment)
        if -len(node) <= index < len(node):
            return node[index]
        raise BadKeyPathError(f"index {index} out of range under '{path}'")
    raise BadKeyPathError(f"'{path}' is a leaf ({type(node).__name__}); cannot descend into {segment!r}")


def _get_by_path(root: dict, dotted: str) -> Any:
    node: Any = root
    walked = []
    for segment in dotted.split("."):
        node = _step(node, segment, ".".join(walked) or "<root>")
        walked.append(segment)
    return node


def _set_by_path(root: dict, dotted: str, value: Any) -> None:
    segments = dotted.split(".")
    if any(not s for s in segments):
        raise BadKeyPathError(f"malformed key path {dotted!r}")
    node: Any = root
    for i, segment in enumerate(segments[:-1]):
        node = _step(node, segment, ".".join(segments[: i + 1]))
    last = segments[-1]
    if isinstance(node, LazySpec):
        node = node.kwargs
    if isinstance(node, dict):
        node[last] = value  # may create a fresh leaf under an existing mapping
        return
    if isinstance(node, list) and last.lstrip("-").isdigit():
        index = int(last)
        if -len(node) <= index < len(node):
            node[index] = value
            return
        raise BadKeyPathError(f"index {index} out of range at '{dotted}'")
    raise BadKeyPathError(f"parent of '{dotted}' is a leaf ({type(node).__name__}); cannot assign")


def _restricted_import(name, globals=None, locals=None, fromlist=(), level=0):
    root = name.split(".")[0]
    if level != 0:
        raise ImportError("relative imports are not available inside config files")
    if root not in _ALLOWED_IMPORT_ROOTS:
        raise ImportError(
            f"config files may only import from {_ALLOWED_IMPORT_ROOTS}; got {name!r}"
        )
    return builtins.__import__(name, globals, locals, fromlist, level)


def _env(name: str, default: str = "") -> str:
    """Config-side helper: read an environment variable without importing os."""
    return os.environ.get(name, default)


def _collect_top_level(namespace: dict, injected: Iterable[str]) -> dict:
    skip = set(injected)
    root = {}
    for name, value in namespace.items():
        if name.startswith("_") or name in skip:
            continue
        if isinstance(value, types.ModuleType):
            continue
        if isinstance(value, (types.FunctionType, types.BuiltinFunctionType, type)):
            continue  # helper functions/classes, not config values
        root[name] = value
    return root


def load_config(path) -> ConfigTree:
    """Execute a Python config file and collect its top-level names into a tree.

    The file runs with a restricted import surface (``detkit``, ``math`` and a
    few stdlib data modules) plus injected helpers:

    - ``L(target, **kwargs)`` builds a LazySpec,
    - ``include("relative.py")`` loads another config file relative to this
      one and returns its tree (a fresh copy, safe to edit while composing),
    - ``env(name, default)`` reads an environment variable.

    No model object is constructed at load time. Top-level modules, function
    and class helpers, and ``_``-prefixed names are dropped; everything else
    becomes a tree entry.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ConfigFileMissingError(f"config file not found: {path!r}")
    with open(path, "r", encoding="utf-8") as handle:
        source = handle.read()

    def include(relative):
        return copy.deepcopy(load_config(os.path.join(os.path.dirname(path), os.fspath(relative))))

    safe_builtins = dict(vars(builtins))
    safe_builtins["__import__"] = _restricted_import
    injected = {"L": L, "LazySpec": LazySpec, "include": include, "env": _env}
    namespace: dict = {"__builtins__": safe_builtins, "__file__": path, **injected}
    try:
        exec(compile(source, path, "exec"), namespace)
    except ConfigError:
        raise
    except Exception as err:
        raise ConfigEvaluationError(f"config {path!r} raised {type(err).__name__}: {err}") from err

    root = _collect_top_level(namespace, [*injected, "__builtins__", "__file__"])
    if not root:
        raise EmptyConfigError(f"config {path!r} defines no top-level values")
    return ConfigTree(root=root)


def _parse_override_value(raw: str) -> Any:
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        return raw  # fallback: raw string


def apply_overrides(tree: ConfigTree, overrides: Sequence[str]) -> ConfigTree:
    """Return a new tree with ``"dotted.key=value"`` overrides applied.

    Values parse as Python literals first (numbers, True/False, quoted
    strings, lists, tuples, dicts) and fall back to the raw string. The input
    tree is left untouched; each key must address an existing node or create
    a fresh leaf under an existing mapping.
    """
    root = copy.deepcopy(tree.root)
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise OverrideParseError(f"override {item!r} is not of the form dotted.key=value")
        _set_by_path(root, key, _parse_override_value(raw))
    return ConfigTree(root=root)


def _resolve_target(target: str, config_path: str):
    parts = target.split(".")
    for split in range(len(parts) - 1, 0, -1):
        module_name = ".".join(parts[:split])
        try:
            module = importlib.import_module(module_name)
        except ModuleNotFoundError:
            continue
        except Exception as err:  # the module exists but failed to import
            raise TargetNotFoundError(
                f"importing {module_name!r} for target {target!r} at config path "
                f"'{config_path or '<root>'}' failed: {err}"
            ) from err
        obj = module
        for attr in parts[split:]:
            try:
                obj = getattr(obj, attr)
            except AttributeError as err:
                raise TargetNotFoundError(
                    f"target {target!r} at config path '{config_path or '<root>'}': "
                    f"module {module_name!r} has no attribute {attr!r}"
                ) from err
        return obj
    raise TargetNotFoundError(
        f"target {target!r} at config path '{config_path or '<root>'}' does not name an importable module"
    )


def instantiate(node: Any, _path: str = "") -> Any:
    """Recursively construct a node.

    Nested LazySpecs are instantiated bottom-up before the parent's
    constructor runs; dicts/lists/tuples are rebuilt with instantiated
    children; plain values pass through unchanged. Children are built in
    sorted key order, not declaration order, so that a config and its
    canonical dump consume any global rng identically.
    """
    if isinstance(node, LazySpec):
        kwargs = {
            key: instantiate(node.kwargs[key], f"{_path}.{key}" if _path else key)
            for key in sorted(node.kwargs)
        }
        target = _resolve_target(node.target, _path)
        try:
            return target(**kwargs)
        except Exception as err:
            raise ConstructionError(
                f"constructing {node.target!r} at config path '{_path or '<root>'}' "
                f"failed: {type(err).__name__}: {err}"
            ) from err
    if isinstance(node, dict):
        ordered = sorted(node, key=lambda k: (type(k).__name__, repr(k)))
        built = {key: instantiate(node[key], f"{_path}.{key}" if _path else str(key)) for key in ordered}
        return {key: built[key] for key in node}
    if isinstance(node, (list, tuple)):
        return type(node)(instantiate(value, f"{_path}[{i}]") for i, value in enumerate(node))
    return node


_HEADER = "# canonical config dump; executable, sorted keys, deterministic formatting\n"


def _format_value(value: Any, path: str) -> str:
    if value is None or isinstance(value, (bool, int, str)):
        return repr(value)
    if isinstance(value, float):
        return repr(value)  # repr round-trips exactly
    if isinstance(value, (list, tuple)):
        inner = [_format_value(v, f"{path}[{i}]") for i, v in enumerate(value)]
        if isinstance(value, tuple):
            return "(" + ", ".join(inner) + ("," if len(inner) == 1 else "") + ")"
        return "[" + ", ".join(inner) + "]"
    if isinstance(value, dict):
        for key in value:
            if not isinstance(key, (str, int, float, bool)) and key is not None:
                raise UnserializableError(f"dict key {key!r} at '{path}' has no canonical form")
        items = sorted(value.items(), key=lambda kv: (type(kv[0]).__name__, repr(kv[0])))
        body = ", ".join(f"{k!r}: {_format_value(v, f'{path}.{k}')}" for k, v in items)
        return "{" + body + "}"
    if isinstance(value, LazySpec):
        args = [repr(value.target)]
        for key in sorted(value.kwargs):
            if not key.isidentifier() or keyword.iskeyword(key):
                raise UnserializableError(f"kwarg name {key!r} at '{path}' cannot be written as a keyword argument")
            args.append(f"{key}={_format_value(value.kwargs[key], f'{path}.{key}')}")
        return "L(" + ", ".join(args) + ")"
    raise UnserializableError(
        f"config path '{path}' holds a live {type(value).__name__}; only plain data and LazySpecs dump"
    )


def dump_config(tree: ConfigTree, path=None) -> str:
    """Serialize a tree to its canonical text form.

    The form is itself an executable config module: sorted top-level keys,
    deterministic literal formatting, LazySpecs rendered as ``L(...)`` calls.
    Two dumps of equal trees are byte-identical, and ``load_config`` on the
    dump reproduces the tree. Returns the text; also writes it when ``path``
    is given.
    """
    lines = [_HEADER]
    for key in sorted(tree.root):
        if not isinstance(key, str) or not key.isidentifier() or keyword.iskeyword(key):
            raise UnserializableError(f"top-level key {key!r} is not an assignable name")
        lines.append(f"{key} = {_format_value(tree.root[key], key)}\n")
    text = "".join(lines)
    if path is not None:
        with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
    return text
