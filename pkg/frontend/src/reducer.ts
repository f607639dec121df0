// Pure grid state: a snapshot plus the stream folded over it.
//
// The invariant the tests enforce: folding any event sequence over a
// snapshot yields exactly what a fresh snapshot fetch would return. A
// sequence gap (seq jumps past as_of_seq + 1) cannot be folded safely
// and demands a full resync, signalled via GapError.

import { COLOR_BY_STATE, SlotView, SpaceDetail, StreamEvent } from "./types.js";

export interface GridState {
  spaceId: string;
  asOfSeq: number;
  slots: SlotView[];
}

export class GapError extends Error {
  constructor(public expected: number, public got: number) {
    super(`event gap: expected seq ${expected}, got ${got}`);
  }
}

export function fromSnapshot(detail: SpaceDetail): GridState {
  return {
    spaceId: detail.space_id,
    asOfSeq: detail.as_of_seq,
    slots: detail.slots.map((slot) => ({ ...slot })),
  };
}

export function applyEvent(state: GridState, event: StreamEvent): GridState {
  if (event.seq <= state.asOfSeq) {
    return state; // replayed duplicate: the snapshot already covers it
  }
  if (event.seq > state.asOfSeq + 1) {
    throw new GapError(state.asOfSeq + 1, event.seq);
  }
  if (event.space_id !== state.spaceId) {
    // someone else's lot: advance the cursor, grid unchanged
    return { ...state, asOfSeq: event.seq };
  }
  if (event.slot.color !== COLOR_BY_STATE[event.slot.state]) {
    throw new Error(`server sent off-palette slot: ${JSON.stringify(event.slot)}`);
  }
  const slots = state.slots.map((slot) =>
    slot.slot_no === event.slot_no ? { ...event.slot } : slot,
  );
  return { spaceId: state.spaceId, asOfSeq: event.seq, slots };
}

export function applyAll(state: GridState, events: StreamEvent[]): GridState {
  return events.reduce(applyEvent, state);
}

/** Equality check used by the dev-mode reconciliation and the tests. */
export function sameGrid(a: GridState, b: GridState): boolean {
  return (
    a.spaceId === b.spaceId &&
    a.slots.length === b.slots.length &&
    a.slots.every((slot, i) => {
      const other = b.slots[i];
      return (
        slot.slot_no === other.slot_no &&
        slot.state === other.state &&
        slot.color === other.color &&
        slot.reserved_by_me === other.reserved_by_me
      );
    })
  );
}
