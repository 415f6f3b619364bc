from .codec import (
    FrameEntry,
    FramingError,
    IntegrityError,
    EncodingError,
    NeedMoreBytes,
    StreamDecoder,
    WireFrame,
    crc16_ccitt_false,
    decode_frame,
    encode,
    encode_frame,
)
from .pubsub import STATUS_TOPIC, Bus, Subscription, Topic
from .transport import LoopbackSink, StreamClient, StreamServer, connect_stream, ranging_topic, serve_stream

__all__ = [
    "Bus", "EncodingError", "FrameEntry", "FramingError", "IntegrityError", "LoopbackSink",
    "NeedMoreBytes", "STATUS_TOPIC", "StreamClient", "StreamDecoder", "StreamServer",
    "Subscription", "Topic", "WireFrame", "connect_stream", "crc16_ccitt_false",
    "decode_frame", "encode", "encode_frame", "ranging_topic", "serve_stream",
]
