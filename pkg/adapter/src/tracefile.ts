import { createWriteStream, WriteStream } from "node:fs";
import { once } from "node:events";

import { InstanceRecord, TraceHeader } from "./types.js";

export class TraceWriter {
  private stream: WriteStream;
  private headerWritten = false;

  constructor(path: string, private header: TraceHeader) {
    this.stream = createWriteStream(path, { encoding: "utf-8" });
  }

  private write(line: string): Promise<void> {
    if (!this.stream.write(line + "\n")) {
      return once(this.stream, "drain").then(() => undefined);
    }
    return Promise.resolve();
  }

  async add(record: InstanceRecord): Promise<void> {
    if (!this.headerWritten) {
      await this.write(JSON.stringify(this.header));
      this.headerWritten = true;
    }
    await this.write(JSON.stringify(record));
  }

  async close(): Promise<void> {
    if (!this.headerWritten) {
      await this.write(JSON.stringify(this.header));
      this.headerWritten = true;
    }
    this.stream.end();
    await once(this.stream, "close");
  }
}

export function traceFileText(header: TraceHeader, records: InstanceRecord[]): string {
  return [JSON.stringify(header), ...records.map((r) => JSON.stringify(r))].join("\n") + "\n";
}
