//! Shared fixtures for the criterion benches.

use edgestream::{Body, Header, NodeAddr, Payload, PayloadLocator, StreamId, Timestamp, TopicConfig, TopicId};

pub fn topic(streams: usize) -> TopicConfig {
    TopicConfig::new(
        TopicId::new("bench").unwrap(),
        (0..streams).map(|i| StreamId::new(format!("s{i}")).unwrap()).collect(),
    )
}

/// Round-robin arrivals over the topic's streams, 1 ms apart.
pub fn arrivals(config: &TopicConfig, n: usize) -> Vec<Header> {
    let k = config.streams.len();
    (0..n)
        .map(|i| {
            let ts = Timestamp::from_millis(i as u64);
            Header::new(
                config.topic.clone(),
                config.streams[i % k].clone(),
                (i / k) as u64,
                ts,
                lazy_body(i as u64, 4096),
            )
        })
        .collect()
}

pub fn lazy_body(offset: u64, length: u32) -> Body {
    Body::Lazy(PayloadLocator {
        node: NodeAddr::new("10.0.0.7", 7401),
        segment: 0,
        offset,
        length,
    })
}

pub fn inline_body(size: usize) -> Body {
    Body::Inline(Payload::from(vec![0xa5; size]))
}
