"""``key = value`` configuration files and key files."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .crypto import KeyPair, generate_keypair


class ConfigError(Exception):
    pass


class Config(dict):
    """Parsed config; relative paths resolve against the file's directory."""

    def __init__(self, values: dict, base: Path) -> None:
        super().__init__(values)
        self.base = base

    def require(self, key: str) -> str:
        try:
            return self[key]
        except KeyError:
            raise ConfigError(f"missing required setting {key!r}") from None

    def path(self, key: str, default: str | None = None) -> Path:
        value = self.get(key, default)
        if value is None:
            raise ConfigError(f"missing required setting {key!r}")
        p = Path(value).expanduser()
        return p if p.is_absolute() else self.base / p

    def integer(self, key: str, default: int | None = None) -> int:
        value = self.get(key)
        if value is None:
            if default is None:
                raise ConfigError(f"missing required setting {key!r}")
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"setting {key!r} must be an integer, got {value!r}") from None

    def address(self, key: str, default: str | None = None) -> tuple[str, int]:
        return parse_address(self.get(key, default) or self.require(key))


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"bad address {text!r}, expected host:port")
    return host or "127.0.0.1", int(port)


def load_config(path: str | os.PathLike) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return Config(values, path.resolve().parent)


def save_keypair(key: KeyPair, path: str | os.PathLike) -> None:
    path = Path(path)
    data = json.dumps(
        {"scheme": "ed25519", "private_key": key.private_bytes().hex(), **key.export_public()},
        indent=2,
    )
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(data + "\n")
    os.chmod(path, 0o600)


def load_keypair(path: str | os.PathLike) -> KeyPair:
    try:
        obj = json.loads(Path(path).read_text())
        key = generate_keypair(bytes.fromhex(obj["private_key"]))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load key file {path}: {exc}") from None
    if "key_id" in obj and obj["key_id"] != key.key_id.hex():
        raise ConfigError(f"key file {path}: key_id does not match private key")
    return key


def load_public_key(path: str | os.PathLike) -> bytes:
    """Public key from a key file or a public export; never needs the secret."""
    try:
        obj = json.loads(Path(path).read_text())
        return bytes.fromhex(obj["public_key"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read public key from {path}: {exc}") from None
