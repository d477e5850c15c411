//! Framing of link-message batches: each message is its versioned encoding
//! preceded by a big-endian `u32` length.

use keylab_core::kmlink::{KmMessage, WireError};

pub fn encode_batch(msgs: &[KmMessage]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in msgs {
        let bytes = m.encode();
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode_batch(mut body: &[u8]) -> Result<Vec<KmMessage>, WireError> {
    let mut msgs = Vec::new();
    while !body.is_empty() {
        if body.len() < 4 {
            return Err(WireError::Decode("truncated length prefix".into()));
        }
        let (len, rest) = body.split_at(4);
        let len = u32::from_be_bytes(len.try_into().expect("four bytes")) as usize;
        if rest.len() < len {
            return Err(WireError::Decode("truncated message".into()));
        }
        let (msg, rest) = rest.split_at(len);
        msgs.push(KmMessage::decode(msg)?);
        body = rest;
    }
    Ok(msgs)
}
