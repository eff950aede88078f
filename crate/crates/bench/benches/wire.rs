use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use edgestream::wire::{decode, encode, WireMessage};
use edgestream::{Header, StreamId, Timestamp, TopicId};
use edgestream_bench::{inline_body, lazy_body};

fn header(body: edgestream::Body) -> WireMessage {
    WireMessage::Deliver {
        seq: 42,
        header: Header::new(
            TopicId::new("frames").unwrap(),
            StreamId::new("left").unwrap(),
            7,
            Timestamp::from_millis(1_000),
            body,
        ),
    }
}

fn codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("wire");
    let cases = [
        ("lazy", header(lazy_body(1 << 20, 2_000_000))),
        ("inline_1k", header(inline_body(1024))),
        ("inline_1m", header(inline_body(1 << 20))),
    ];
    for (name, msg) in &cases {
        let bytes = encode(msg).unwrap();
        g.throughput(Throughput::Bytes(bytes.len() as u64));
        g.bench_with_input(BenchmarkId::new("encode", name), msg, |b, m| b.iter(|| encode(black_box(m)).unwrap()));
        g.bench_with_input(BenchmarkId::new("decode", name), &bytes, |b, f| b.iter(|| decode(black_box(f)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
