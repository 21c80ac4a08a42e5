"""SSH2 transport: framing, key exchange, channels, userauth.

One algorithm suite only (curve25519-sha256 / ssh-ed25519 / aes128-ctr /
hmac-sha2-256). The transport runs a single reader thread after the
handshake; sends are serialized by a lock so channels may be used from
several threads.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import os
import socket
import struct
import threading
import time

from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives import serialization

from ..errors import (AuthFailure, ChannelClosed, ConnectFailure,
                      ProtocolError)
from . import wire
from .keys import public_blob, signature_blob, verify_signature
from .wire import Reader, Writer

VERSION_STRING = "SSH-2.0-chainforge_0.1"

KEX_ALGS = ["curve25519-sha256", "curve25519-sha256@libssh.org"]
HOSTKEY_ALGS = ["ssh-ed25519"]
CIPHERS = ["aes128-ctr"]
MACS = ["hmac-sha2-256"]
COMPRESSION = ["none"]

LOCAL_WINDOW = 2 ** 21
MAX_PACKET = 32768
MAX_AUTH_ATTEMPTS = 8


class _Packetizer:
    """Binary packet protocol with optional aes128-ctr + hmac-sha2-256."""

    def __init__(self, sock):
        self.sock = sock
        self._buf = b""
        self._send_seq = 0
        self._recv_seq = 0
        self._send_enc = None
        self._recv_dec = None
        self._send_mac_key = None
        self._recv_mac_key = None
        self._send_lock = threading.Lock()

    # raw socket helpers -------------------------------------------------

    def _read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ChannelClosed("connection closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def read_line(self, limit: int = 4096) -> str:
        while b"\n" not in self._buf:
            if len(self._buf) > limit:
                raise ProtocolError("identification line too long")
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ChannelClosed("connection closed during banner")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.rstrip(b"\r").decode("utf-8", errors="replace")

    def write_raw(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)

    # crypto -------------------------------------------------------------

    def enable_send(self, key: bytes, iv: bytes, mac_key: bytes) -> None:
        self._send_enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
        self._send_mac_key = mac_key

    def enable_recv(self, key: bytes, iv: bytes, mac_key: bytes) -> None:
        self._recv_dec = Cipher(algorithms.AES(key), modes.CTR(iv)).decryptor()
        self._recv_mac_key = mac_key

    # packets ------------------------------------------------------------

    def send_packet(self, payload: bytes) -> None:
        block = 16 if self._send_enc else 8
        pad_len = block - ((5 + len(payload)) % block)
        if pad_len < 4:
            pad_len += block
        packet = (struct.pack(">IB", 1 + len(payload) + pad_len, pad_len)
                  + payload + os.urandom(pad_len))
        with self._send_lock:
            if self._send_enc:
                mac = hmac_mod.new(self._send_mac_key,
                                   struct.pack(">I", self._send_seq) + packet,
                                   hashlib.sha256).digest()
                self.sock.sendall(self._send_enc.update(packet) + mac)
            else:
                self.sock.sendall(packet)
            self._send_seq = (self._send_seq + 1) & 0xFFFFFFFF

    def recv_packet(self) -> bytes:
        if self._recv_dec:
            first = self._recv_dec.update(self._read_exact(16))
            packet_len = struct.unpack(">I", first[:4])[0]
            if not 1 <= packet_len <= 1 << 20:
                raise ProtocolError(f"bad packet length {packet_len}")
            rest = self._recv_dec.update(self._read_exact(packet_len + 4 - 16))
            mac = self._read_exact(32)
            full = first + rest
            expect = hmac_mod.new(self._recv_mac_key,
                                  struct.pack(">I", self._recv_seq) + full,
                                  hashlib.sha256).digest()
            if not hmac_mod.compare_digest(mac, expect):
                raise ProtocolError("MAC verification failed")
        else:
            first = self._read_exact(4)
            packet_len = struct.unpack(">I", first)[0]
            if not 1 <= packet_len <= 1 << 20:
                raise ProtocolError(f"bad packet length {packet_len}")
            full = first + self._read_exact(packet_len)
        self._recv_seq = (self._recv_seq + 1) & 0xFFFFFFFF
        packet_len = struct.unpack(">I", full[:4])[0]
        pad_len = full[4]
        return full[5:4 + packet_len - pad_len]


class Channel:
    """One SSH channel with flow control and a byte receive buffer."""

    def __init__(self, transport: "Transport", local_id: int):
        self.transport = transport
        self.local_id = local_id
        self.remote_id: int | None = None
        self.remote_window = 0
        self.remote_max_packet = MAX_PACKET
        self.local_window = LOCAL_WINDOW
        self.cond = threading.Condition()
        self.buffer = bytearray()
        self.eof_received = False
        self.closed = False
        self.close_sent = False
        self.exit_status: int | None = None
        self.open_event = threading.Event()
        self.open_error: str | None = None
        self._reply_q: list[bool] = []
        # server-side request metadata
        self.pty: tuple | None = None
        self.channel_type = "session"

    # ------------------------------------------------------------ client ops

    def _request(self, name: str, body: Writer | None, want_reply: bool) -> bool:
        w = (Writer().byte(wire.MSG_CHANNEL_REQUEST).uint32(self.remote_id)
             .string(name).boolean(want_reply))
        if body is not None:
            w.raw(body.bytes)
        with self.cond:
            pending = len(self._reply_q)
        self.transport._send(w.bytes)
        if not want_reply:
            return True
        deadline = time.monotonic() + self.transport.timeout
        with self.cond:
            while len(self._reply_q) <= pending:
                if self.closed:
                    raise ChannelClosed("channel closed awaiting reply")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ProtocolError(f"timeout awaiting reply to {name}")
                self.cond.wait(remaining)
            return self._reply_q.pop(0)

    def request_pty(self, term: str = "xterm", cols: int = 80, rows: int = 24) -> bool:
        body = (Writer().string(term).uint32(cols).uint32(rows)
                .uint32(0).uint32(0).string(b"\x00"))
        return self._request("pty-req", body, True)

    def request_shell(self) -> bool:
        return self._request("shell", None, True)

    def request_exec(self, command: str) -> bool:
        return self._request("exec", Writer().string(command), True)

    def request_subsystem(self, name: str) -> bool:
        return self._request("subsystem", Writer().string(name), True)

    def request_window_change(self, cols: int, rows: int) -> None:
        body = Writer().uint32(cols).uint32(rows).uint32(0).uint32(0)
        self._request("window-change", body, False)

    # ------------------------------------------------------------ data

    def send(self, data: bytes) -> None:
        view = memoryview(bytes(data))
        while view:
            with self.cond:
                while self.remote_window <= 0 and not self.closed:
                    self.cond.wait(self.transport.timeout)
                if self.closed:
                    raise ChannelClosed("channel closed")
                n = min(len(view), self.remote_window, self.remote_max_packet, 32768)
                self.remote_window -= n
            chunk = bytes(view[:n])
            view = view[n:]
            self.transport._send(Writer().byte(wire.MSG_CHANNEL_DATA)
                                 .uint32(self.remote_id).string(chunk).bytes)

    def recv_available(self, timeout: float) -> bytes:
        """Available bytes within timeout; b"" on quiet; ChannelClosed once
        the channel is finished and drained."""
        with self.cond:
            if not self.buffer:
                if self.eof_received or self.closed:
                    raise ChannelClosed("channel finished")
                self.cond.wait(max(timeout, 0))
            if not self.buffer:
                if self.eof_received or self.closed:
                    raise ChannelClosed("channel finished")
                return b""
            data = bytes(self.buffer)
            self.buffer.clear()
        self._replenish(len(data))
        return data

    def recv_all(self, timeout: float | None = None) -> bytes:
        """Drain until EOF/close; used for one-shot exec output."""
        out = bytearray()
        deadline = time.monotonic() + timeout if timeout else None
        while True:
            try:
                chunk = self.recv_available(0.25)
            except ChannelClosed:
                break
            out += chunk
            if deadline and time.monotonic() > deadline:
                break
        return bytes(out)

    def _replenish(self, consumed: int) -> None:
        if self.closed:
            return
        self.transport._send(Writer().byte(wire.MSG_CHANNEL_WINDOW_ADJUST)
                             .uint32(self.remote_id).uint32(consumed).bytes)

    def send_eof(self) -> None:
        if self.remote_id is not None and not self.closed:
            try:
                self.transport._send(Writer().byte(wire.MSG_CHANNEL_EOF)
                                     .uint32(self.remote_id).bytes)
            except ChannelClosed:
                pass

    def wait_exit_status(self, timeout: float) -> int | None:
        deadline = time.monotonic() + timeout
        with self.cond:
            while self.exit_status is None and not self.closed:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self.cond.wait(remaining)
            return self.exit_status

    def close(self) -> None:
        with self.cond:
            if self.close_sent or self.remote_id is None:
                self._mark_closed()
                return
            self.close_sent = True
        try:
            self.transport._send(Writer().byte(wire.MSG_CHANNEL_CLOSE)
                                 .uint32(self.remote_id).bytes)
        except (ChannelClosed, OSError):
            pass

    def _mark_closed(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class ChannelStream:
    """socket-like adapter over a Channel, for nested transports (jump hosts)."""

    def __init__(self, channel: Channel):
        self.channel = channel

    def recv(self, n: int) -> bytes:
        while True:
            try:
                data = self.channel.recv_available(30.0)
            except ChannelClosed:
                return b""
            if data:
                return data[:n] if len(data) > n else data

    def sendall(self, data: bytes) -> None:
        self.channel.send(data)

    def close(self) -> None:
        self.channel.close()

    def settimeout(self, value) -> None:
        pass


class Transport:
    """One SSH connection, client or server role."""

    def __init__(self, sock, server_side: bool = False,
                 host_key: ed25519.Ed25519PrivateKey | None = None,
                 server_handlers=None, timeout: float = 30.0):
        self.pkt = _Packetizer(sock)
        self.sock = sock
        self.server_side = server_side
        self.host_key = host_key
        self.server_handlers = server_handlers  # ServerHandlers for fixtures
        self.timeout = timeout
        self.session_id: bytes | None = None
        self.authenticated = False
        self.username: str | None = None
        self._auth_attempts = 0
        self._channels: dict[int, Channel] = {}
        self._next_channel = 0
        self._chan_lock = threading.Lock()
        self._alive = False
        self._pump_thread: threading.Thread | None = None
        self._global_replies: list[bool] = []
        self._global_cond = threading.Condition()
        self._auth_result: bool | None = None
        self._auth_cond = threading.Condition()
        self._keepalive_stop = threading.Event()
        self.on_closed = None  # callback for owners

    # ------------------------------------------------------------ lifecycle

    def _send(self, payload: bytes) -> None:
        if not self._alive and self.session_id is not None:
            raise ChannelClosed("transport closed")
        try:
            self.pkt.send_packet(payload)
        except OSError as exc:
            raise ChannelClosed(f"send failed: {exc}") from exc

    def start_client(self, host_key_check=None) -> None:
        """Version exchange, kex, NEWKEYS. host_key_check(blob) may raise."""
        self.pkt.write_raw((VERSION_STRING + "\r\n").encode())
        peer = self.pkt.read_line()
        while not peer.startswith("SSH-"):
            peer = self.pkt.read_line()
        if not peer.startswith("SSH-2.0") and not peer.startswith("SSH-1.99"):
            raise ProtocolError(f"unsupported peer version {peer!r}")
        self._kex(VERSION_STRING, peer, host_key_check)
        self._alive = True
        self._start_pump()

    def start_server(self) -> None:
        self.pkt.write_raw((VERSION_STRING + "\r\n").encode())
        peer = self.pkt.read_line()
        if not peer.startswith("SSH-"):
            raise ProtocolError(f"bad client version {peer!r}")
        self._kex(peer, VERSION_STRING, None)
        self._alive = True
        self._start_pump()

    def _start_pump(self) -> None:
        self._pump_thread = threading.Thread(target=self._pump, daemon=True)
        self._pump_thread.start()

    def start_keepalive(self, interval: float = 30.0) -> None:
        def loop():
            while not self._keepalive_stop.wait(interval):
                try:
                    self._send(Writer().byte(wire.MSG_IGNORE).string(b"").bytes)
                except ChannelClosed:
                    return
        threading.Thread(target=loop, daemon=True).start()

    def close(self) -> None:
        self._keepalive_stop.set()
        if self._alive:
            try:
                self.pkt.send_packet(Writer().byte(wire.MSG_DISCONNECT)
                                     .uint32(wire.DISCONNECT_BY_APPLICATION)
                                     .string("bye").string("").bytes)
            except Exception:
                pass
        self._shutdown()

    def _shutdown(self) -> None:
        self._alive = False
        try:
            self.sock.close()
        except Exception:
            pass
        with self._chan_lock:
            channels = list(self._channels.values())
        for ch in channels:
            ch._mark_closed()
        with self._auth_cond:
            self._auth_cond.notify_all()
        if self.on_closed:
            try:
                self.on_closed()
            except Exception:
                pass

    @property
    def is_alive(self) -> bool:
        return self._alive

    # ------------------------------------------------------------ kex

    def _build_kexinit(self) -> bytes:
        return (Writer().byte(wire.MSG_KEXINIT).raw(os.urandom(16))
                .namelist(KEX_ALGS).namelist(HOSTKEY_ALGS)
                .namelist(CIPHERS).namelist(CIPHERS)
                .namelist(MACS).namelist(MACS)
                .namelist(COMPRESSION).namelist(COMPRESSION)
                .namelist([]).namelist([])
                .boolean(False).uint32(0).bytes)

    @staticmethod
    def _choose(client: list[str], server: list[str], what: str) -> str:
        for alg in client:
            if alg in server:
                return alg
        raise ProtocolError(f"no common {what}: client {client} server {server}")

    def _kex(self, v_c: str, v_s: str, host_key_check) -> None:
        my_kexinit = self._build_kexinit()
        self.pkt.send_packet(my_kexinit)
        peer_kexinit = self.pkt.recv_packet()
        while peer_kexinit[0] in (wire.MSG_IGNORE, wire.MSG_DEBUG):
            peer_kexinit = self.pkt.recv_packet()
        if peer_kexinit[0] != wire.MSG_KEXINIT:
            raise ProtocolError(f"expected KEXINIT, got {peer_kexinit[0]}")
        r = Reader(peer_kexinit[1:])
        r.pos += 16  # cookie
        peer_kex = r.namelist()
        peer_hostkeys = r.namelist()
        peer_c2s_ciph = r.namelist()
        peer_s2c_ciph = r.namelist()
        peer_c2s_mac = r.namelist()
        peer_s2c_mac = r.namelist()
        peer_c2s_comp = r.namelist()
        peer_s2c_comp = r.namelist()
        r.namelist(); r.namelist()
        first_follows = r.boolean()

        if self.server_side:
            client_kex, server_kex = peer_kex, KEX_ALGS
            client_hk, server_hk = peer_hostkeys, HOSTKEY_ALGS
            c2s = self._choose(peer_c2s_ciph, CIPHERS, "cipher")
            s2c = self._choose(peer_s2c_ciph, CIPHERS, "cipher")
            self._choose(peer_c2s_mac, MACS, "mac")
            self._choose(peer_s2c_mac, MACS, "mac")
            self._choose(peer_c2s_comp, COMPRESSION, "compression")
            self._choose(peer_s2c_comp, COMPRESSION, "compression")
            i_c, i_s = peer_kexinit, my_kexinit
        else:
            client_kex, server_kex = KEX_ALGS, peer_kex
            client_hk, server_hk = HOSTKEY_ALGS, peer_hostkeys
            self._choose(CIPHERS, peer_c2s_ciph, "cipher")
            self._choose(CIPHERS, peer_s2c_ciph, "cipher")
            self._choose(MACS, peer_c2s_mac, "mac")
            self._choose(MACS, peer_s2c_mac, "mac")
            i_c, i_s = my_kexinit, peer_kexinit
        kex_alg = self._choose(client_kex, server_kex, "kex")
        self._choose(client_hk, server_hk, "host key alg")
        if first_follows:
            self.pkt.recv_packet()  # guessed packet is wrong by construction

        if self.server_side:
            self._kex_curve25519_server(v_c, v_s, i_c, i_s)
        else:
            self._kex_curve25519_client(v_c, v_s, i_c, i_s, host_key_check)

    @staticmethod
    def _exchange_hash(v_c, v_s, i_c, i_s, k_s, q_c, q_s, k_int) -> bytes:
        w = (Writer().string(v_c).string(v_s).string(i_c).string(i_s)
             .string(k_s).string(q_c).string(q_s).mpint(k_int))
        return hashlib.sha256(w.bytes).digest()

    def _derive_keys(self, k_int: int, h: bytes) -> None:
        k = Writer().mpint(k_int).bytes

        def dk(letter: bytes, size: int) -> bytes:
            out = hashlib.sha256(k + h + letter + self.session_id).digest()
            while len(out) < size:
                out += hashlib.sha256(k + h + out).digest()
            return out[:size]

        iv_c2s, iv_s2c = dk(b"A", 16), dk(b"B", 16)
        key_c2s, key_s2c = dk(b"C", 16), dk(b"D", 16)
        mac_c2s, mac_s2c = dk(b"E", 32), dk(b"F", 32)
        if self.server_side:
            self.pkt.enable_send(key_s2c, iv_s2c, mac_s2c)
            self.pkt.enable_recv(key_c2s, iv_c2s, mac_c2s)
        else:
            self.pkt.enable_send(key_c2s, iv_c2s, mac_c2s)
            self.pkt.enable_recv(key_s2c, iv_s2c, mac_s2c)

    def _kex_curve25519_client(self, v_c, v_s, i_c, i_s, host_key_check) -> None:
        priv = x25519.X25519PrivateKey.generate()
        q_c = priv.public_key().public_bytes(serialization.Encoding.Raw,
                                             serialization.PublicFormat.Raw)
        self.pkt.send_packet(Writer().byte(wire.MSG_KEX_ECDH_INIT).string(q_c).bytes)
        reply = self.pkt.recv_packet()
        while reply[0] in (wire.MSG_IGNORE, wire.MSG_DEBUG):
            reply = self.pkt.recv_packet()
        if reply[0] != wire.MSG_KEX_ECDH_REPLY:
            raise ProtocolError(f"expected ECDH_REPLY, got {reply[0]}")
        r = Reader(reply[1:])
        k_s = r.string()
        q_s = r.string()
        sig = r.string()
        shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(q_s))
        k_int = int.from_bytes(shared, "big")
        h = self._exchange_hash(v_c, v_s, i_c, i_s, k_s, q_c, q_s, k_int)
        if not verify_signature(k_s, sig, h):
            raise ProtocolError("host key signature verification failed")
        if host_key_check is not None:
            host_key_check(k_s)
        self.session_id = h
        self.pkt.send_packet(Writer().byte(wire.MSG_NEWKEYS).bytes)
        pkt = self.pkt.recv_packet()
        while pkt[0] in (wire.MSG_IGNORE, wire.MSG_DEBUG):
            pkt = self.pkt.recv_packet()
        if pkt[0] != wire.MSG_NEWKEYS:
            raise ProtocolError(f"expected NEWKEYS, got {pkt[0]}")
        self._derive_keys(k_int, h)

    def _kex_curve25519_server(self, v_c, v_s, i_c, i_s) -> None:
        pkt = self.pkt.recv_packet()
        while pkt[0] in (wire.MSG_IGNORE, wire.MSG_DEBUG):
            pkt = self.pkt.recv_packet()
        if pkt[0] != wire.MSG_KEX_ECDH_INIT:
            raise ProtocolError(f"expected ECDH_INIT, got {pkt[0]}")
        q_c = Reader(pkt[1:]).string()
        priv = x25519.X25519PrivateKey.generate()
        q_s = priv.public_key().public_bytes(serialization.Encoding.Raw,
                                             serialization.PublicFormat.Raw)
        shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(q_c))
        k_int = int.from_bytes(shared, "big")
        k_s = public_blob(self.host_key.public_key())
        h = self._exchange_hash(v_c, v_s, i_c, i_s, k_s, q_c, q_s, k_int)
        sig = signature_blob(self.host_key, h)
        self.session_id = h
        self.pkt.send_packet(Writer().byte(wire.MSG_KEX_ECDH_REPLY)
                             .string(k_s).string(q_s).string(sig).bytes)
        self.pkt.send_packet(Writer().byte(wire.MSG_NEWKEYS).bytes)
        pkt = self.pkt.recv_packet()
        while pkt[0] in (wire.MSG_IGNORE, wire.MSG_DEBUG):
            pkt = self.pkt.recv_packet()
        if pkt[0] != wire.MSG_NEWKEYS:
            raise ProtocolError(f"expected NEWKEYS, got {pkt[0]}")
        self._derive_keys(k_int, h)

    # ------------------------------------------------------------ client auth

    def _await_auth_result(self) -> bool:
        deadline = time.monotonic() + self.timeout
        with self._auth_cond:
            while self._auth_result is None:
                if not self._alive:
                    raise ChannelClosed("transport closed during auth")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise AuthFailure("authentication timed out")
                self._auth_cond.wait(remaining)
            result, self._auth_result = self._auth_result, None
            return result

    def auth_password(self, username: str, password: str) -> None:
        self._send(Writer().byte(wire.MSG_SERVICE_REQUEST)
                   .string("ssh-userauth").bytes)
        self._send(Writer().byte(wire.MSG_USERAUTH_REQUEST)
                   .string(username).string("ssh-connection")
                   .string("password").boolean(False).string(password).bytes)
        if not self._await_auth_result():
            raise AuthFailure(f"password authentication failed for {username!r}")
        self.authenticated = True

    def auth_publickey(self, username: str,
                       key: ed25519.Ed25519PrivateKey) -> None:
        self._send(Writer().byte(wire.MSG_SERVICE_REQUEST)
                   .string("ssh-userauth").bytes)
        blob = public_blob(key.public_key())
        body = (Writer().byte(wire.MSG_USERAUTH_REQUEST)
                .string(username).string("ssh-connection")
                .string("publickey").boolean(True)
                .string("ssh-ed25519").string(blob)).bytes
        signed = Writer().string(self.session_id).raw(body).bytes
        sig = signature_blob(key, signed)
        self._send(body + Writer().string(sig).bytes)
        if not self._await_auth_result():
            raise AuthFailure(f"publickey authentication failed for {username!r}")
        self.authenticated = True

    # ------------------------------------------------------------ channels

    def _new_channel(self) -> Channel:
        with self._chan_lock:
            cid = self._next_channel
            self._next_channel += 1
            ch = Channel(self, cid)
            self._channels[cid] = ch
            return ch

    def open_session(self) -> Channel:
        ch = self._new_channel()
        self._send(Writer().byte(wire.MSG_CHANNEL_OPEN).string("session")
                   .uint32(ch.local_id).uint32(LOCAL_WINDOW).uint32(MAX_PACKET).bytes)
        if not ch.open_event.wait(self.timeout):
            raise ProtocolError("timeout opening session channel")
        if ch.open_error is not None:
            raise ConnectFailure(f"channel open failed: {ch.open_error}")
        return ch

    def open_direct_tcpip(self, host: str, port: int) -> Channel:
        ch = self._new_channel()
        self._send(Writer().byte(wire.MSG_CHANNEL_OPEN).string("direct-tcpip")
                   .uint32(ch.local_id).uint32(LOCAL_WINDOW).uint32(MAX_PACKET)
                   .string(host).uint32(port).string("127.0.0.1").uint32(0).bytes)
        if not ch.open_event.wait(self.timeout):
            raise ConnectFailure("timeout opening direct-tcpip channel")
        if ch.open_error is not None:
            raise ConnectFailure(f"tunnel to {host}:{port} failed: {ch.open_error}")
        return ch

    # ------------------------------------------------------------ pump

    def _pump(self) -> None:
        try:
            while True:
                payload = self.pkt.recv_packet()
                if not payload:
                    continue
                self._dispatch(payload)
        except (ChannelClosed, ProtocolError, OSError):
            pass
        finally:
            self._shutdown()

    def _dispatch(self, payload: bytes) -> None:
        t = payload[0]
        body = Reader(payload[1:])
        if t in (wire.MSG_IGNORE, wire.MSG_DEBUG, wire.MSG_UNIMPLEMENTED,
                 wire.MSG_EXT_INFO):
            return
        if t == wire.MSG_DISCONNECT:
            raise ChannelClosed("peer disconnected")
        if t == wire.MSG_GLOBAL_REQUEST:
            name = body.text()
            want_reply = body.boolean()
            if want_reply:
                self._send(Writer().byte(wire.MSG_REQUEST_FAILURE).bytes)
            return
        if t in (wire.MSG_REQUEST_SUCCESS, wire.MSG_REQUEST_FAILURE):
            with self._global_cond:
                self._global_replies.append(t == wire.MSG_REQUEST_SUCCESS)
                self._global_cond.notify_all()
            return
        if t in (wire.MSG_USERAUTH_SUCCESS, wire.MSG_USERAUTH_FAILURE,
                 wire.MSG_USERAUTH_BANNER, wire.MSG_USERAUTH_PK_OK,
                 wire.MSG_SERVICE_ACCEPT):
            self._client_auth_message(t, body)
            return
        if t == wire.MSG_SERVICE_REQUEST:
            self._server_service_request(body)
            return
        if t == wire.MSG_USERAUTH_REQUEST:
            self._server_userauth(body)
            return
        if t == wire.MSG_CHANNEL_OPEN:
            self._server_channel_open(body)
            return
        if t in (wire.MSG_CHANNEL_OPEN_CONFIRMATION, wire.MSG_CHANNEL_OPEN_FAILURE,
                 wire.MSG_CHANNEL_WINDOW_ADJUST, wire.MSG_CHANNEL_DATA,
                 wire.MSG_CHANNEL_EXTENDED_DATA, wire.MSG_CHANNEL_EOF,
                 wire.MSG_CHANNEL_CLOSE, wire.MSG_CHANNEL_REQUEST,
                 wire.MSG_CHANNEL_SUCCESS, wire.MSG_CHANNEL_FAILURE):
            self._channel_message(t, body)
            return
        if t == wire.MSG_KEXINIT:
            raise ProtocolError("re-keying is not supported")
        # Unknown message: tell the peer.
        self._send(Writer().byte(wire.MSG_UNIMPLEMENTED)
                   .uint32(self.pkt._recv_seq - 1).bytes)

    # -- client auth replies

    def _client_auth_message(self, t: int, body: Reader) -> None:
        if t == wire.MSG_SERVICE_ACCEPT or t == wire.MSG_USERAUTH_BANNER:
            return
        if t == wire.MSG_USERAUTH_SUCCESS:
            with self._auth_cond:
                self._auth_result = True
                self._auth_cond.notify_all()
        elif t == wire.MSG_USERAUTH_FAILURE:
            with self._auth_cond:
                self._auth_result = False
                self._auth_cond.notify_all()
        elif t == wire.MSG_USERAUTH_PK_OK:
            # We always send signed requests directly; ignore.
            return

    # -- server side

    def _server_service_request(self, body: Reader) -> None:
        service = body.text()
        if service != "ssh-userauth":
            raise ProtocolError(f"unsupported service {service!r}")
        self._send(Writer().byte(wire.MSG_SERVICE_ACCEPT)
                   .string("ssh-userauth").bytes)

    def _server_userauth(self, body: Reader) -> None:
        handlers = self.server_handlers
        username = body.text()
        body.text()  # service
        method = body.text()
        if self.authenticated:
            return
        self._auth_attempts += 1
        if self._auth_attempts > MAX_AUTH_ATTEMPTS:
            raise ProtocolError("too many authentication attempts")

        def fail():
            handlers.record_auth_failure(username, method)
            self._send(Writer().byte(wire.MSG_USERAUTH_FAILURE)
                       .namelist(["publickey", "password"]).boolean(False).bytes)

        def succeed():
            self.authenticated = True
            self.username = username
            handlers.record_auth_success(username, method)
            self._send(Writer().byte(wire.MSG_USERAUTH_SUCCESS).bytes)

        if method == "password":
            body.boolean()
            password = body.text()
            if handlers.check_password(username, password):
                succeed()
            else:
                fail()
        elif method == "publickey":
            has_sig = body.boolean()
            alg = body.text()
            blob = body.string()
            if alg != "ssh-ed25519" or not handlers.check_public_key(username, blob):
                fail()
                return
            if not has_sig:
                self._send(Writer().byte(wire.MSG_USERAUTH_PK_OK)
                           .string(alg).string(blob).bytes)
                return
            sig = body.string()
            signed = (Writer().string(self.session_id)
                      .byte(wire.MSG_USERAUTH_REQUEST)
                      .string(username).string("ssh-connection")
                      .string("publickey").boolean(True)
                      .string(alg).string(blob)).bytes
            if verify_signature(blob, sig, signed):
                succeed()
            else:
                fail()
        else:
            fail()

    def _server_channel_open(self, body: Reader) -> None:
        ctype = body.text()
        remote_id = body.uint32()
        remote_window = body.uint32()
        remote_max = body.uint32()

        def reject(code: int, text: str) -> None:
            self._send(Writer().byte(wire.MSG_CHANNEL_OPEN_FAILURE)
                       .uint32(remote_id).uint32(code).string(text)
                       .string("").bytes)

        if not self.authenticated:
            reject(wire.OPEN_CONNECT_FAILED, "not authenticated")
            return
        if ctype == "session":
            ch = self._new_channel()
            ch.remote_id = remote_id
            ch.remote_window = remote_window
            ch.remote_max_packet = remote_max
            ch.channel_type = "session"
            self._send(Writer().byte(wire.MSG_CHANNEL_OPEN_CONFIRMATION)
                       .uint32(remote_id).uint32(ch.local_id)
                       .uint32(LOCAL_WINDOW).uint32(MAX_PACKET).bytes)
            self.server_handlers.session_opened(self, ch)
        elif ctype == "direct-tcpip" and self.server_handlers.allow_direct_tcpip:
            host = body.text()
            port = body.uint32()
            try:
                out = socket.create_connection((host, port), timeout=10)
            except OSError as exc:
                reject(wire.OPEN_CONNECT_FAILED, f"connect failed: {exc}")
                return
            ch = self._new_channel()
            ch.remote_id = remote_id
            ch.remote_window = remote_window
            ch.remote_max_packet = remote_max
            ch.channel_type = "direct-tcpip"
            self._send(Writer().byte(wire.MSG_CHANNEL_OPEN_CONFIRMATION)
                       .uint32(remote_id).uint32(ch.local_id)
                       .uint32(LOCAL_WINDOW).uint32(MAX_PACKET).bytes)
            self.server_handlers.tunnel_opened(self, ch, out, host, port)
        else:
            reject(wire.OPEN_UNKNOWN_CHANNEL_TYPE, f"unsupported type {ctype!r}")

    # -- channel routing

    def _channel_message(self, t: int, body: Reader) -> None:
        cid = body.uint32()
        with self._chan_lock:
            ch = self._channels.get(cid)
        if ch is None:
            return
        if t == wire.MSG_CHANNEL_OPEN_CONFIRMATION:
            ch.remote_id = body.uint32()
            ch.remote_window = body.uint32()
            ch.remote_max_packet = body.uint32()
            ch.open_event.set()
        elif t == wire.MSG_CHANNEL_OPEN_FAILURE:
            body.uint32()
            ch.open_error = body.text() or "open failed"
            ch.open_event.set()
            with self._chan_lock:
                self._channels.pop(cid, None)
        elif t == wire.MSG_CHANNEL_WINDOW_ADJUST:
            add = body.uint32()
            with ch.cond:
                ch.remote_window += add
                ch.cond.notify_all()
        elif t == wire.MSG_CHANNEL_DATA:
            data = body.string()
            with ch.cond:
                ch.buffer += data
                ch.cond.notify_all()
        elif t == wire.MSG_CHANNEL_EXTENDED_DATA:
            body.uint32()
            data = body.string()
            with ch.cond:
                ch.buffer += data
                ch.cond.notify_all()
        elif t == wire.MSG_CHANNEL_EOF:
            with ch.cond:
                ch.eof_received = True
                ch.cond.notify_all()
        elif t == wire.MSG_CHANNEL_CLOSE:
            if not ch.close_sent:
                ch.close_sent = True
                try:
                    self._send(Writer().byte(wire.MSG_CHANNEL_CLOSE)
                               .uint32(ch.remote_id).bytes)
                except ChannelClosed:
                    pass
            ch._mark_closed()
            with self._chan_lock:
                self._channels.pop(cid, None)
        elif t == wire.MSG_CHANNEL_REQUEST:
            name = body.text()
            want_reply = body.boolean()
            self._server_channel_request(ch, name, want_reply, body)
        elif t in (wire.MSG_CHANNEL_SUCCESS, wire.MSG_CHANNEL_FAILURE):
            with ch.cond:
                ch._reply_q.append(t == wire.MSG_CHANNEL_SUCCESS)
                ch.cond.notify_all()

    def _server_channel_request(self, ch: Channel, name: str,
                                want_reply: bool, body: Reader) -> None:
        if name == "exit-status":
            with ch.cond:
                ch.exit_status = body.uint32()
                ch.cond.notify_all()
            return
        if self.server_handlers is None:
            if want_reply:
                self._send(Writer().byte(wire.MSG_CHANNEL_FAILURE)
                           .uint32(ch.remote_id).bytes)
            return
        ok = self.server_handlers.channel_request(self, ch, name, body)
        if want_reply:
            msg = wire.MSG_CHANNEL_SUCCESS if ok else wire.MSG_CHANNEL_FAILURE
            self._send(Writer().byte(msg).uint32(ch.remote_id).bytes)

    # -- server conveniences used by handlers

    def send_exit_status(self, ch: Channel, status: int) -> None:
        try:
            self._send(Writer().byte(wire.MSG_CHANNEL_REQUEST)
                       .uint32(ch.remote_id).string("exit-status")
                       .boolean(False).uint32(status).bytes)
        except ChannelClosed:
            pass
