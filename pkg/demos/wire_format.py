"""A short tour of the message codec and how a forward proxy rewrites requests.

Run with ``python3 demos/wire_format.py``.
"""
from wotcast.coap import Code, compute_cache_key, decode_message, encode_message, request, split_proxy_uri

# A client addresses the proxy with the full target URI in Proxy-Uri.
req = request(Code.GET, "coap://srv/instruction?t=5", token=b"\x01\x02", message_id=7)
wire = encode_message(req)
print("proxied GET on the wire:", wire.hex(" "))

back = decode_message(wire)
assert back == req
parts = split_proxy_uri(back)
print("host", parts.host, "path", parts.path, "query", parts.query)

# Two clients asking for the same resource with different tokens share a cache key.
other = request(Code.GET, "coap://srv/instruction?t=5", token=b"\x09", message_id=99)
print("same cache key:", compute_cache_key(req) == compute_cache_key(other))
