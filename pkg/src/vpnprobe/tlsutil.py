"""Certificate generation/loading and TLS contexts for the TLS-facing probes."""

from __future__ import annotations

import datetime
import os
import ssl
import tempfile
from dataclasses import dataclass
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.x509.oid import NameOID

from .core import CertificateMaterial, TrustRole


@dataclass(frozen=True)
class PemPair:
    cert_pem: bytes
    key_pem: bytes
    chain_pem: bytes = b""  # issuing CA, appended when serving

    @property
    def der(self) -> bytes:
        return x509.load_pem_x509_certificate(self.cert_pem).public_bytes(serialization.Encoding.DER)

    def private_key(self):
        return serialization.load_pem_private_key(self.key_pem, password=None)


@dataclass(frozen=True)
class Authority:
    """A test CA.  Clients that list ``cert_pem`` as a trust anchor treat
    what it issues as 'widely trusted'."""

    name: str
    cert_pem: bytes
    key_pem: bytes


def new_key(bits: int = 2048):
    return rsa.generate_private_key(public_exponent=65537, key_size=bits)


def _key_pem(key) -> bytes:
    return key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                             serialization.NoEncryption())


def _build(subject: str, key, issuer_name: str, issuer_key, *, ca: bool, days: int) -> x509.Certificate:
    now = datetime.datetime.now(datetime.timezone.utc)
    builder = (x509.CertificateBuilder()
               .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, subject)]))
               .issuer_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, issuer_name)]))
               .public_key(key.public_key())
               .serial_number(x509.random_serial_number())
               .not_valid_before(now - datetime.timedelta(minutes=5))
               .not_valid_after(now + datetime.timedelta(days=days))
               .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=True))
    if ca:
        builder = builder.add_extension(x509.KeyUsage(
            digital_signature=True, content_commitment=False, key_encipherment=False, data_encipherment=False,
            key_agreement=False, key_cert_sign=True, crl_sign=True, encipher_only=False,
            decipher_only=False), critical=True)
    else:
        builder = builder.add_extension(x509.SubjectAlternativeName([x509.DNSName(subject)]), critical=False)
    return builder.sign(issuer_key, hashes.SHA256())


def self_signed(subject: str = "vpn.example.com", key=None, days: int = 30) -> CertificateMaterial:
    key = key or new_key()
    cert = _build(subject, key, subject, key, ca=False, days=days)
    pair = PemPair(cert.public_bytes(serialization.Encoding.PEM), _key_pem(key))
    return CertificateMaterial(subject, True, TrustRole.UntrustedSelfSigned, pair)


def make_authority(name: str = "vpnprobe test root", key=None) -> Authority:
    key = key or new_key()
    cert = _build(name, key, name, key, ca=True, days=365)
    return Authority(name, cert.public_bytes(serialization.Encoding.PEM), _key_pem(key))


def issue(authority: Authority, subject: str, trust_role: TrustRole = TrustRole.ValidWrongIdentity,
          key=None, days: int = 30) -> CertificateMaterial:
    key = key or new_key()
    ca_key = serialization.load_pem_private_key(authority.key_pem, password=None)
    cert = _build(subject, key, authority.name, ca_key, ca=False, days=days)
    pair = PemPair(cert.public_bytes(serialization.Encoding.PEM), _key_pem(key), authority.cert_pem)
    return CertificateMaterial(subject, False, TrustRole(trust_role), pair)


def load_material(cert_path: str, key_path: str, trust_role: TrustRole = TrustRole.UntrustedSelfSigned,
                  chain_path: Optional[str] = None) -> CertificateMaterial:
    with open(cert_path, "rb") as fh:
        cert_pem = fh.read()
    with open(key_path, "rb") as fh:
        key_pem = fh.read()
    chain = b""
    if chain_path:
        with open(chain_path, "rb") as fh:
            chain = fh.read()
    cert = x509.load_pem_x509_certificate(cert_pem)
    serialization.load_pem_private_key(key_pem, password=None)  # fail early on a bad key
    cn = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    subject = cn[0].value if cn else cert.subject.rfc4514_string()
    return CertificateMaterial(subject, cert.issuer == cert.subject, TrustRole(trust_role),
                               PemPair(cert_pem, key_pem, chain))


def pem_pair(material: CertificateMaterial) -> PemPair:
    if not isinstance(material.key_ref, PemPair):
        raise TypeError("certificate material carries no PEM key pair")
    return material.key_ref


def cert_der(material: CertificateMaterial) -> bytes:
    return pem_pair(material).der


def server_context(material: CertificateMaterial) -> ssl.SSLContext:
    pair = pem_pair(material)
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    # load_cert_chain only reads files
    fd, path = tempfile.mkstemp(suffix=".pem")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(pair.cert_pem + pair.chain_pem + pair.key_pem)
        ctx.load_cert_chain(path)
    finally:
        os.unlink(path)
    return ctx


def client_context(verify: bool, ca_pem: Optional[bytes] = None) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    if verify:
        ctx.verify_mode = ssl.CERT_REQUIRED
        ctx.check_hostname = True
        if ca_pem:
            ctx.load_verify_locations(cadata=ca_pem.decode())
    else:
        ctx.check_hostname = False
        ctx.verify_mode = ssl.CERT_NONE
    return ctx


def rsa_sign(material: CertificateMaterial, data: bytes, algorithm=None) -> bytes:
    key = pem_pair(material).private_key()
    return key.sign(data, padding.PKCS1v15(), algorithm or hashes.SHA1())


def rsa_verify(cert_der_bytes: bytes, signature: bytes, data: bytes, algorithm=None) -> bool:
    cert = x509.load_der_x509_certificate(cert_der_bytes)
    try:
        cert.public_key().verify(signature, data, padding.PKCS1v15(), algorithm or hashes.SHA1())
        return True
    except Exception:
        return False


def verify_issued_by(cert_der_bytes: bytes, ca_pem: bytes) -> bool:
    """True iff ``cert`` is signed by the CA in ``ca_pem`` and currently valid."""
    cert = x509.load_der_x509_certificate(cert_der_bytes)
    ca = x509.load_pem_x509_certificate(ca_pem)
    try:
        cert.verify_directly_issued_by(ca)
    except Exception:
        return False
    now = datetime.datetime.now(datetime.timezone.utc)
    return cert.not_valid_before_utc <= now <= cert.not_valid_after_utc


def subject_names(cert_der_bytes: bytes) -> list[str]:
    cert = x509.load_der_x509_certificate(cert_der_bytes)
    names = [a.value for a in cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)]
    try:
        san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
        names += san.get_values_for_type(x509.DNSName)
    except x509.ExtensionNotFound:
        pass
    return names
