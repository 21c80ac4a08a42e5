"""Minimal SSH2 transport (client and server) used by the remote executors.

Single algorithm suite: curve25519-sha256 key exchange, ssh-ed25519 host
keys, aes128-ctr encryption, hmac-sha2-256 integrity. The server side
exists for loopback testing and interoperates with the stock OpenSSH
client; the client side implements one-shot exec, PTY shell sessions,
direct-tcpip jump chains and an SFTP v3 subset.
"""

from .client import SshClient, SshTarget
from .keys import generate_host_key, load_private_key, public_key_line

__all__ = ["SshClient", "SshTarget", "generate_host_key", "load_private_key",
           "public_key_line"]
